"""Contour rasterization and segmentation metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .graph import JSRT_ORGAN_SIZES, organ_ranges

log = logging.getLogger(__name__)

BACKGROUND, LUNGS, HEART = 0, 1, 2
CTR_NORMAL_RANGE = (0.42, 0.50)


class UndefinedMetricError(ValueError):
    """A metric was requested on inputs for which it is not defined."""


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def fill_polygon(poly, shape) -> np.ndarray:
    """Even-odd scanline fill; pixel (r, c) is inside if its centre (x=c, y=r) is.

    Crossings are computed with the half-open rule ``(y_i > y) != (y_j > y)``
    so shared vertices are counted once.
    """
    poly = np.asarray(poly, dtype=float)
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    if len(poly) < 3 or polygon_area(poly) == 0.0:
        log.warning("degenerate polygon with zero area; leaving region empty")
        return out
    xi, yi = poly[:, 0], poly[:, 1]
    xj, yj = np.roll(xi, -1), np.roll(yi, -1)
    r0 = max(int(np.floor(yi.min())), 0)
    r1 = min(int(np.ceil(yi.max())), h - 1)
    cols = np.arange(w, dtype=float)
    for r in range(r0, r1 + 1):
        y = float(r)
        crosses = (yi > y) != (yj > y)
        if not crosses.any():
            continue
        a, b, c, d = xi[crosses], yi[crosses], xj[crosses], yj[crosses]
        xs = np.sort((c - a) * (y - b) / (d - b) + a)
        # number of crossings strictly right of each pixel centre
        right = len(xs) - np.searchsorted(xs, cols, side="right")
        out[r] = (right % 2) == 1
    return out


def rasterize(landmarks, shape, organ_sizes=JSRT_ORGAN_SIZES) -> np.ndarray:
    """Label mask from a landmark set: 1 = lungs, 2 = heart (heart wins on overlap)."""
    if isinstance(shape, int):
        shape = (shape, shape)
    pts = np.asarray(landmarks, dtype=float)
    if pts.shape != (sum(organ_sizes), 2):
        raise ValueError(f"expected {sum(organ_sizes)} landmarks, got {pts.shape}")
    mask = np.zeros(shape, dtype=np.uint8)
    ranges = organ_ranges(organ_sizes)
    for start, stop in ranges[:-1]:
        mask[fill_polygon(pts[start:stop], shape)] = LUNGS
    start, stop = ranges[-1]
    mask[fill_polygon(pts[start:stop], shape)] = HEART
    return mask


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"dice shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """(x, y) coordinates of foreground pixels with a 4-connected background neighbour."""
    m = np.asarray(mask, bool)
    padded = np.pad(m, 1)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    rows, cols = np.nonzero(m & ~interior)
    return np.stack([cols, rows], axis=-1).astype(float)


def hausdorff(a, b, spacing_mm: float = 1.0) -> float:
    """Symmetric Hausdorff distance between two point sets, scaled by ``spacing_mm``."""
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("hausdorff distance of an empty point set")
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba)) * spacing_mm


def landmark_mse(pred, gt) -> float:
    """Mean squared pixel error over all 2M coordinates."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ValueError(f"landmark count mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def occlude(image: np.ndarray, box_frac: float, rng: np.random.Generator):
    """Black out a random in-bounds square of side ``box_frac`` x image side.

    Returns ``(occluded_image, (x0, y0, side))``.
    """
    if not 0.0 <= box_frac <= 1.0:
        raise ValueError("box_frac must lie in [0, 1]")
    h, w = image.shape[-2:]
    side = int(round(box_frac * min(h, w)))
    x0 = int(rng.integers(0, w - side + 1))
    y0 = int(rng.integers(0, h - side + 1))
    out = np.array(image, copy=True)
    out[..., y0 : y0 + side, x0 : x0 + side] = 0.0
    return out, (x0, y0, side)


def compute_ctr(landmarks, organ_sizes=JSRT_ORGAN_SIZES) -> float:
    """Cardiothoracic ratio: heart width over the horizontal span of both lungs."""
    pts = np.asarray(landmarks, dtype=float)
    ranges = organ_ranges(organ_sizes)
    lungs = pts[ranges[0][0] : ranges[-2][1]]
    heart = pts[ranges[-1][0] : ranges[-1][1]]
    if len(lungs) == 0 or len(heart) == 0:
        raise UndefinedMetricError("CTR needs lung and heart landmarks")
    thorax = lungs[:, 0].max() - lungs[:, 0].min()
    if thorax == 0:
        raise UndefinedMetricError("zero thorax width")
    return float((heart[:, 0].max() - heart[:, 0].min()) / thorax)


def ctr_is_normal(ctr: float) -> bool:
    lo, hi = CTR_NORMAL_RANGE
    return lo <= ctr <= hi


@dataclass
class SampleMetrics:
    sample_id: str
    mse: float
    dice_lungs: float
    hd_lungs: float
    dice_heart: float
    hd_heart: float


@dataclass
class MetricReport:
    rows: list[SampleMetrics] = field(default_factory=list)

    FIELDS = ("mse", "dice_lungs", "hd_lungs", "dice_heart", "hd_heart")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def mean(self, name: str) -> float:
        return float(self.column(name).mean()) if self.rows else float("nan")

    def std(self, name: str) -> float:
        return float(self.column(name).std()) if self.rows else float("nan")

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(("sample_id",) + self.FIELDS)
            for r in self.rows:
                wr.writerow([r.sample_id] + [_fmt(getattr(r, f)) for f in self.FIELDS])
            wr.writerow(["mean"] + [_fmt(self.mean(f)) for f in self.FIELDS])
            wr.writerow(["std"] + [_fmt(self.std(f)) for f in self.FIELDS])


def _fmt(v: float) -> str:
    return repr(float(v))


def evaluate_sample(sample_id, pred, gt, shape, spacing_mm, organ_sizes=JSRT_ORGAN_SIZES, gt_mask=None) -> SampleMetrics:
    """Metrics for one prediction.

    HD uses graph nodes for both sides unless a dense ``gt_mask`` is given, in
    which case its 4-connected boundary pixels are the ground-truth operand.
    """
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    pm = rasterize(pred, shape, organ_sizes)
    gm = rasterize(gt, shape, organ_sizes) if gt_mask is None else np.asarray(gt_mask)
    ranges = organ_ranges(organ_sizes)
    lung_sl = slice(ranges[0][0], ranges[-2][1])
    heart_sl = slice(ranges[-1][0], ranges[-1][1])
    if gt_mask is None:
        gt_lungs, gt_heart = gt[lung_sl], gt[heart_sl]
    else:
        gt_lungs, gt_heart = mask_boundary(gm == LUNGS), mask_boundary(gm == HEART)
    return SampleMetrics(
        sample_id=str(sample_id),
        mse=landmark_mse(pred, gt),
        dice_lungs=dice(pm == LUNGS, gm == LUNGS),
        hd_lungs=hausdorff(pred[lung_sl], gt_lungs, spacing_mm),
        dice_heart=dice(pm == HEART, gm == HEART),
        hd_heart=hausdorff(pred[heart_sl], gt_heart, spacing_mm),
    )


@dataclass
class SweepRow:
    frac: float
    dice_mean: float
    dice_std: float
    hd_mean: float
    hd_std: float


def occlusion_sweep(predict, samples, fracs, seed: int = 0, organ_sizes=JSRT_ORGAN_SIZES) -> list[SweepRow]:
    """Evaluate ``predict(images) -> landmarks`` under random black boxes.

    Dice and HD are averaged over lungs and heart per sample, then aggregated
    over samples. Each fraction draws boxes from a fresh generator seeded with
    ``seed`` so fraction 0 reproduces the unoccluded evaluation.
    """
    rows = []
    for frac in fracs:
        rng = np.random.default_rng(seed)
        images = np.stack([occlude(s.image, frac, rng)[0] for s in samples])
        preds = predict(images)
        dices, hds = [], []
        for s, p in zip(samples, preds):
            m = evaluate_sample(s.source, p, s.landmarks, s.image.shape, s.spacing_mm, organ_sizes)
            dices.append((m.dice_lungs + m.dice_heart) / 2)
            hds.append((m.hd_lungs + m.hd_heart) / 2)
        rows.append(SweepRow(float(frac), float(np.mean(dices)), float(np.std(dices)), float(np.mean(hds)), float(np.std(hds))))
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("frac", "dice_mean", "dice_std", "hd_mean", "hd_std"))
        for r in rows:
            wr.writerow([_fmt(r.frac), _fmt(r.dice_mean), _fmt(r.dice_std), _fmt(r.hd_mean), _fmt(r.hd_std)])
