"""Dataset ingestion, augmentation and synthetic chest phantoms.

File formats
------------
* landmarks: plain text, one ``x y`` pair per line in pixel units (x right,
  y down), contour order right lung (44), left lung (50), heart (26).
* images: binary PGM (P5), 8 or 16 bit, normalized to [0, 1] on load.
* masks: 8-bit P5 holding raw labels 0 background, 1 lungs, 2 heart.
* manifest: JSON array of ``{image, landmarks, mask?, spacing_mm, split}``
  with paths relative to the manifest file.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .graph import JSRT_ORGAN_SIZES, cycle_adjacency, organ_ranges
from .metrics import rasterize

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
GAMMA_RANGE = (0.60, 1.40)
ROTATION_RANGE = (-3.0, 3.0)
SCALE_RANGE = (0.9, 1.1)
MAX_AUGMENT_ATTEMPTS = 100


class ManifestError(ValueError):
    """A manifest entry could not be loaded."""


@dataclass
class Sample:
    image: np.ndarray  # H x W in [0, 1]
    landmarks: np.ndarray  # M x 2 pixel coordinates
    spacing_mm: float = 1.0
    split: str = "train"
    source: str = ""
    mask: np.ndarray | None = None


# -- PGM / landmark files ----------------------------------------------------


def _pgm_tokens(buf: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1


def read_pgm(path, normalize: bool = True) -> np.ndarray:
    """Read a binary P5 PGM; returns floats in [0,1] or the raw integer values."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    (w, h, maxval), offset = _pgm_tokens(buf, 3)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(buf) - offset < need:
        raise ValueError(f"{path}: truncated pixel data")
    raw = np.frombuffer(buf, dtype=dtype, count=w * h, offset=offset).reshape(h, w)
    if not normalize:
        return raw.astype(np.int64)
    return raw.astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray, maxval: int = 65535) -> None:
    """Write ``image`` (floats in [0,1]) as P5, or raw integers when it has an integer dtype."""
    img = np.asarray(image)
    if np.issubdtype(img.dtype, np.integer):
        vals = img
    else:
        vals = np.round(np.clip(img, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = img.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + vals.astype(dtype).tobytes())


def read_landmarks(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'x y', got {line!r}")
        rows.append((float(parts[0]), float(parts[1])))
    return np.array(rows, dtype=float).reshape(-1, 2)


def write_landmarks(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=float)
    Path(path).write_text("".join(f"{x!r} {y!r}\n" for x, y in pts.tolist()))


# -- manifest ----------------------------------------------------------------


@dataclass
class ManifestEntry:
    index: int
    image: Path
    landmarks: Path
    spacing_mm: float
    split: str
    mask: Path | None = None


def split_counts(n: int, percents=(70, 10, 20)) -> tuple[int, int, int]:
    """Train rounded half-up, val floored, remainder to test."""
    train = (2 * n * percents[0] + 100) // 200
    val = n * percents[1] // 100
    return train, val, n - train - val


def assign_splits(n: int, rng: np.random.Generator, percents=(70, 10, 20)) -> list[str]:
    tr, va, _ = split_counts(n, percents)
    labels = np.array(["test"] * n, dtype=object)
    order = rng.permutation(n)
    labels[order[:tr]] = "train"
    labels[order[tr : tr + va]] = "val"
    return list(labels)


def load_manifest(path, organ_sizes=JSRT_ORGAN_SIZES) -> list[ManifestEntry]:
    """Parse and validate a manifest; every problem names the offending entry."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(raw, list):
        raise ManifestError(f"{path}: manifest must be a JSON array")
    root = path.parent
    expected = int(sum(organ_sizes))
    entries = []
    for i, item in enumerate(raw):
        where = f"{path} entry {i}"
        if not isinstance(item, dict):
            raise ManifestError(f"{where}: not an object")
        try:
            image = root / item["image"]
            lms = root / item["landmarks"]
            spacing = float(item["spacing_mm"])
            split = str(item["split"])
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{where}: malformed entry ({e!r})") from None
        mask = root / item["mask"] if item.get("mask") else None
        if split not in SPLITS:
            raise ManifestError(f"{where}: unknown split {split!r}")
        if not spacing > 0:
            raise ManifestError(f"{where}: spacing_mm must be positive")
        for p in (image, lms) + ((mask,) if mask else ()):
            if not p.is_file():
                raise ManifestError(f"{where}: missing file {p}")
        try:
            n = len(read_landmarks(lms))
        except ValueError as e:
            raise ManifestError(f"{where}: {e}") from None
        if n != expected:
            raise ManifestError(f"{where}: {lms} has {n} landmark lines, expected {expected}")
        entries.append(ManifestEntry(i, image, lms, spacing, split, mask))
    counts = {s: sum(e.split == s for e in entries) for s in SPLITS}
    log.info("manifest %s: %d entries, split %s", path, len(entries), counts)
    return entries


def load_sample(entry: ManifestEntry) -> Sample:
    image = read_pgm(entry.image)
    mask = read_pgm(entry.mask, normalize=False).astype(np.uint8) if entry.mask else None
    return Sample(image, read_landmarks(entry.landmarks), entry.spacing_mm, entry.split, entry.image.stem, mask)


def load_dataset(path, organ_sizes=JSRT_ORGAN_SIZES) -> list[Sample]:
    return [load_sample(e) for e in load_manifest(path, organ_sizes)]


# -- graph construction ------------------------------------------------------


def normalize(points, shape) -> np.ndarray:
    h, w = shape
    return np.asarray(points, float) / np.array([w, h], float)


def denormalize(points, shape) -> np.ndarray:
    h, w = shape
    return np.asarray(points, float) * np.array([w, h], float)


def build_graph_from_landmarks(points, shape, organ_sizes=JSRT_ORGAN_SIZES):
    """Return ``(adjacency, node_features)`` for one landmark set.

    Adjacency is one closed cycle per organ and does not depend on the points.
    """
    pts = np.asarray(points, float)
    if pts.shape != (sum(organ_sizes), 2):
        raise ValueError(f"expected {sum(organ_sizes)} landmarks, got {pts.shape}")
    h, w = shape
    if (pts < 0).any() or (pts[:, 0] > w - 1).any() or (pts[:, 1] > h - 1).any():
        raise ValueError("landmark outside image bounds")
    return cycle_adjacency(organ_sizes), normalize(pts, shape)


# -- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationParams:
    gamma: float = 1.0
    rotation_deg: float = 0.0
    scale_x: float = 1.0
    scale_y: float = 1.0
    offset_x: float = 0.0
    offset_y: float = 0.0


def affine_matrix(params: AugmentationParams, in_shape, out_shape) -> np.ndarray:
    """3x3 map from source pixel (x, y, 1) to output pixel coordinates."""
    ih, iw = in_shape
    oh, ow = out_shape
    t_in = np.array([[1, 0, -(iw - 1) / 2], [0, 1, -(ih - 1) / 2], [0, 0, 1]], float)
    scale = np.diag([params.scale_x, params.scale_y, 1.0])
    th = math.radians(params.rotation_deg)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], float)
    t_out = np.array([[1, 0, (ow - 1) / 2 + params.offset_x], [0, 1, (oh - 1) / 2 + params.offset_y], [0, 0, 1]], float)
    return t_out @ rot @ scale @ t_in


def transform_points(mat: np.ndarray, points) -> np.ndarray:
    pts = np.asarray(points, float)
    return pts @ mat[:2, :2].T + mat[:2, 2]


def _warp(image: np.ndarray, mat: np.ndarray, out_shape, order: int) -> np.ndarray:
    inv = np.linalg.inv(mat)
    oh, ow = out_shape
    ys, xs = np.mgrid[0:oh, 0:ow].astype(float)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return ndimage.map_coordinates(image, [sy, sx], order=order, mode="constant", cval=0.0)


def augment(sample: Sample, params: AugmentationParams, out_size: int | None = None) -> Sample:
    """Apply gamma, rotation, per-axis scaling and crop/pad to image and landmarks."""
    in_shape = sample.image.shape
    out_shape = (out_size, out_size) if out_size else in_shape
    mat = affine_matrix(params, in_shape, out_shape)
    image = sample.image if params.gamma == 1.0 else np.power(sample.image, params.gamma)
    mask = sample.mask
    if in_shape == out_shape and np.array_equal(mat, np.eye(3)):
        image = np.array(image, copy=True)
        lms = np.array(sample.landmarks, copy=True)
    else:
        image = _warp(image, mat, out_shape, order=1)
        lms = transform_points(mat, sample.landmarks)
        if mask is not None:
            mask = _warp(mask.astype(float), mat, out_shape, order=0).astype(np.uint8)
    return replace(sample, image=image, landmarks=lms, mask=mask)


def resize_params(in_shape, size: int) -> AugmentationParams:
    """Centre-aligned per-axis scaling that maps an image of ``in_shape`` onto ``size`` x ``size``."""
    h, w = in_shape
    return AugmentationParams(scale_x=size / w, scale_y=size / h)


def resize_to(sample: Sample, size: int) -> Sample:
    """Resample a sample to the network input size; pixel spacing grows accordingly."""
    if sample.image.shape == (size, size):
        return sample
    h, w = sample.image.shape
    out = augment(sample, resize_params((h, w), size), out_size=size)
    return replace(out, spacing_mm=sample.spacing_mm * max(h, w) / size)


def landmarks_in_frame(points, shape) -> bool:
    h, w = shape
    p = np.asarray(points)
    return bool(((p[:, 0] > 0) & (p[:, 0] < w - 1) & (p[:, 1] > 0) & (p[:, 1] < h - 1)).all())


def sample_augmentation(sample: Sample, rng: np.random.Generator, out_size: int | None = None) -> AugmentationParams:
    """Draw augmentation parameters, rejecting draws that push landmarks out of frame.

    Falls back to a pure gamma/crop transform after ``MAX_AUGMENT_ATTEMPTS``.
    """
    ih, iw = sample.image.shape
    oh, ow = (out_size, out_size) if out_size else (ih, iw)
    gamma = float(rng.uniform(*GAMMA_RANGE))
    for _ in range(MAX_AUGMENT_ATTEMPTS):
        params = AugmentationParams(
            gamma=gamma,
            rotation_deg=float(rng.uniform(*ROTATION_RANGE)),
            scale_x=float(rng.uniform(*SCALE_RANGE)),
            scale_y=float(rng.uniform(*SCALE_RANGE)),
            offset_x=float(rng.uniform(-1, 1) * abs(ow - iw) / 2),
            offset_y=float(rng.uniform(-1, 1) * abs(oh - ih) / 2),
        )
        mat = affine_matrix(params, (ih, iw), (oh, ow))
        if landmarks_in_frame(transform_points(mat, sample.landmarks), (oh, ow)):
            return params
    return AugmentationParams(gamma=gamma)


# -- mask input mode ---------------------------------------------------------


def mask_to_input(sample: Sample, organ_sizes=JSRT_ORGAN_SIZES) -> Sample:
    """Replace the image with its label mask scaled to [0,1] (labels / 2).

    Samples without a stored mask use the rasterized ground-truth landmarks.
    """
    mask = sample.mask
    if mask is None:
        mask = rasterize(sample.landmarks, sample.image.shape, organ_sizes)
    mask = np.asarray(mask)
    bad = np.setdiff1d(np.unique(mask), [0, 1, 2])
    if bad.size:
        raise ValueError(f"mask has unexpected labels {bad.tolist()}")
    return replace(sample, image=mask.astype(float) / 2.0, mask=mask.astype(np.uint8))


# -- synthetic phantoms ------------------------------------------------------


@dataclass(frozen=True)
class PhantomShape:
    """Generator parameters, in pixels, of one phantom."""

    right_lung: tuple[float, float, float, float]  # cx, cy, ax, ay
    left_lung: tuple[float, float, float, float]
    heart: tuple[float, float, float, float]
    wobble: tuple[float, float]  # lung contour perturbation amplitude / phase

    @property
    def heart_width(self) -> float:
        return 2.0 * self.heart[2]


def _contour(cx, cy, ax, ay, n, wobble=0.0, phase=0.0):
    t = -np.pi / 2 + 2 * np.pi * np.arange(n) / n
    r = 1.0 + wobble * np.sin(2 * t + phase)
    return np.stack([cx + ax * r * np.cos(t), cy + ay * r * np.sin(t)], axis=-1)


def phantom_landmarks(shape: PhantomShape, organ_sizes=JSRT_ORGAN_SIZES) -> np.ndarray:
    amp, phase = shape.wobble
    parts = [
        _contour(*shape.right_lung, organ_sizes[0], amp, phase),
        _contour(*shape.left_lung, organ_sizes[1], amp, -phase),
        _contour(*shape.heart, organ_sizes[2]),
    ]
    return np.concatenate(parts)


def random_phantom_shape(rng: np.random.Generator, size: int = 128) -> PhantomShape:
    s = size / 128.0
    u = rng.uniform

    def organ(cx, cy, ax, ay, jitter=3.0):
        return (s * (cx + u(-jitter, jitter)), s * (cy + u(-jitter, jitter)), s * u(*ax), s * u(*ay))

    return PhantomShape(
        right_lung=organ(38, 58, (17, 21), (34, 40)),
        left_lung=organ(90, 58, (16, 20), (34, 40)),
        heart=organ(66, 84, (16, 21), (11, 15)),
        wobble=(u(0.0, 0.06), u(0, 2 * np.pi)),
    )


def synthesize_phantom(rng: np.random.Generator, size: int = 128, organ_sizes=JSRT_ORGAN_SIZES, shape: PhantomShape | None = None) -> Sample:
    """Chest-like phantom: dark lungs and a bright heart on a soft-tissue body."""
    shape = shape or random_phantom_shape(rng, size)
    lms = phantom_landmarks(shape, organ_sizes)
    mask = rasterize(lms, (size, size), organ_sizes)
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    body = ((xs - size / 2) / (0.47 * size)) ** 2 + ((ys - 0.55 * size) / (0.5 * size)) ** 2 < 1.0
    tissue = rng.uniform(0.5, 0.6)
    image = np.where(body, tissue, 0.08)
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), 3.0) * 0.25
    image = np.where(mask == 1, rng.uniform(0.15, 0.25) + texture, image)
    image = np.where(mask == 2, tissue + rng.uniform(0.2, 0.3), image)
    image = ndimage.gaussian_filter(image, 1.0) + rng.normal(0.0, 0.02, (size, size))
    return Sample(np.clip(image, 0.0, 1.0), lms, 0.35 * 1024 / size, "train", "", mask)


def organ_points(points, organ: int, organ_sizes=JSRT_ORGAN_SIZES) -> np.ndarray:
    start, stop = organ_ranges(organ_sizes)[organ]
    return np.asarray(points)[start:stop]
