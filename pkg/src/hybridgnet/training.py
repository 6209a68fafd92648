"""Losses, Adam, learning-rate schedule, checkpoints and the training loop."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Sample, augment, mask_to_input, normalize, resize_to, sample_augmentation
from .graph import pool
from .model import ForwardOutputs, HybridGNetConfig, LandmarkModel, PCAModel, build_model, pca_fit

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "loss_total", "loss_mse", "loss_ds", "loss_kl", "val_loss")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    epochs: int = 3000
    lr: float = 1e-4
    batch_size: int = 4
    weight_decay: float = 1e-5
    kl_weight: float = 1e-5
    lr_decay_factor: float = 0.9
    lr_decay_every: int | None = None  # None: 100 with IGSC, 50 otherwise
    seed: int = 0
    ds_weight: float = 1.0
    augment: bool = True
    mask_input: bool = False

    def validate(self) -> None:
        for name in ("epochs", "lr", "batch_size", "kl_weight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.ds_weight < 0:
            raise ValueError("weight_decay and ds_weight must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every is not None and self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")

    def decay_every(self, igsc: bool) -> int:
        if self.lr_decay_every is not None:
            return self.lr_decay_every
        return 100 if igsc else 50


def lr_at(epoch: int, cfg: TrainConfig, igsc: bool = True) -> float:
    """Step decay: ``lr * factor ** floor(epoch / decay_every)``."""
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.decay_every(igsc))


def loss_total(outputs: ForwardOutputs, target: np.ndarray, target_coarse: np.ndarray | None, cfg: TrainConfig, image_size: int):
    """Pixel-space landmark MSE + deep supervision + weighted KL.

    ``target`` / ``target_coarse`` are normalized coordinates; every MSE term
    is reported in squared pixels. Returns ``(total, breakdown)``.
    """
    scale = float(image_size) ** 2
    if outputs.positions.shape != np.shape(target):
        raise ValueError(f"prediction {outputs.positions.shape} does not match target {np.shape(target)}")
    rec = ad.mse(outputs.positions, target) * scale
    total = rec
    ds = None
    if outputs.ds_coarse is not None or outputs.ds_fine is not None:
        terms = []
        if outputs.ds_coarse is not None:
            if outputs.ds_coarse.shape != np.shape(target_coarse):
                raise ValueError("coarse deep-supervision output does not match the pooled target")
            terms.append(ad.mse(outputs.ds_coarse, target_coarse))
        if outputs.ds_fine is not None:
            terms.append(ad.mse(outputs.ds_fine, target))
        ds = terms[0] if len(terms) == 1 else terms[0] + terms[1]
        ds = ds * scale
        total = total + ds * cfg.ds_weight
    kl = None
    if outputs.mu is not None:
        kl = ad.kl_divergence(outputs.mu, outputs.logvar)
        total = total + kl * cfg.kl_weight
    breakdown = {
        "loss_mse": float(rec.data),
        "loss_ds": float(ds.data) if ds is not None else 0.0,
        "loss_kl": float(kl.data) if kl is not None else 0.0,
    }
    breakdown["loss_total"] = float(total.data)
    return total, breakdown


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - lr * update - lr * weight_decay * p.data


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    config: dict
    epoch: int = 0
    val_loss: float = float("nan")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``manifest.json`` + ``params.bin`` (little-endian f32, names sorted)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.params):
        t = ckpt.params[name]
        arr = np.asarray(t.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "trainable": bool(t.requires_grad)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": "hybridgnet-checkpoint-1",
        "config": ckpt.config,
        "epoch": int(ckpt.epoch),
        "val_loss": float(ckpt.val_loss),
        "params": entries,
    }
    (path / "params.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest_path, blob_path = path / "manifest.json", path / "params.bin"
    if not manifest_path.is_file() or not blob_path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    manifest = json.loads(manifest_path.read_text())
    blob = blob_path.read_bytes()
    expected = sum(4 * math.prod(e["shape"]) for e in manifest["params"])
    if len(blob) != expected:
        raise ValueError(f"{blob_path}: {len(blob)} bytes, manifest describes {expected}")
    params = {}
    for e in manifest["params"]:
        n = math.prod(e["shape"])
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).astype(np.float64).reshape(e["shape"])
        params[e["name"]] = Tensor(arr, requires_grad=e.get("trainable", True))
    return Checkpoint(params, manifest["config"], manifest["epoch"], manifest["val_loss"])


def model_from_checkpoint(ckpt: Checkpoint) -> LandmarkModel:
    cfg = HybridGNetConfig.from_dict(ckpt.config["model"] if "model" in ckpt.config else ckpt.config)
    return build_model(cfg, params=ckpt.params)


# -- training loop ------------------------------------------------------------


def prepare_batch(samples: list[Sample], image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack images to [N,1,S,S] and landmarks to normalized [N,M,2], resizing as needed."""
    images, targets = [], []
    for s in samples:
        s = resize_to(s, image_size)
        images.append(s.image)
        targets.append(normalize(s.landmarks, s.image.shape))
    return np.stack(images)[:, None], np.stack(targets)


def coarse_targets(model: LandmarkModel, targets: np.ndarray) -> np.ndarray:
    return pool(targets, model.topology.plans[0])


def _uses_igsc(model: LandmarkModel) -> bool:
    return model.config.kind == "hybrid" and len(model.config.igsc_levels) > 0


def batch_loss(model: LandmarkModel, images, targets, cfg: TrainConfig, rng, mode: str):
    out = model.forward(images, rng=rng, mode=mode)
    return loss_total(out, targets, coarse_targets(model, targets), cfg, model.config.image_size)


def evaluate_loss(model: LandmarkModel, samples: list[Sample], cfg: TrainConfig, batch_size: int = 8) -> float:
    """Mean total loss in inference mode (z = mu)."""
    total, count = 0.0, 0
    for i in range(0, len(samples), batch_size):
        images, targets = prepare_batch(samples[i : i + batch_size], model.config.image_size)
        _, parts = batch_loss(model, images, targets, cfg, None, "infer")
        total += parts["loss_total"] * len(images)
        count += len(images)
    return total / count


@dataclass
class TrainResult:
    best: Checkpoint
    log: list[dict] = field(default_factory=list)
    last_params: dict[str, Tensor] | None = None


def _snapshot(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}


def fit_shape_model(model: PCAModel, train: list[Sample]) -> None:
    _, targets = prepare_batch(train, model.config.image_size)
    mean, comps, _ = pca_fit(targets.reshape(len(targets), -1), model.config.pca_components)
    model.set_shape_model(mean, comps)


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_FIELDS)
        for r in rows:
            wr.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])


def train(
    samples: list[Sample],
    model: LandmarkModel,
    cfg: TrainConfig,
    config_snapshot: dict | None = None,
    log_path=None,
    checkpoint_dir=None,
) -> TrainResult:
    """Train ``model`` in place on the train split, selecting by validation loss.

    Rows of the per-epoch log are appended to ``log_path`` as they complete;
    the best checkpoint is written to ``checkpoint_dir`` at the end, or before
    re-raising when training diverges.
    """
    cfg.validate()
    if cfg.mask_input:
        samples = [mask_to_input(s, model.config.organ_sizes) for s in samples]
    train_set = [s for s in samples if s.split == "train"]
    val_set = [s for s in samples if s.split == "val"]
    if not train_set or not val_set:
        raise ValueError("training needs non-empty train and val splits")
    if isinstance(model, PCAModel):
        fit_shape_model(model, train_set)

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    order_rng, aug_rng, latent_rng = (np.random.default_rng(s) for s in seeds)
    size = model.config.image_size
    igsc = _uses_igsc(model)
    opt = Adam()
    snapshot = config_snapshot if config_snapshot is not None else {"model": model.config.to_dict(), "train": asdict(cfg)}
    best = Checkpoint(_snapshot(model.params), snapshot, -1, float("inf"))
    rows: list[dict] = []
    if log_path is not None:
        write_log([], log_path)

    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = lr_at(epoch, cfg, igsc)
            order = order_rng.permutation(len(train_set))
            sums = dict.fromkeys(("loss_total", "loss_mse", "loss_ds", "loss_kl"), 0.0)
            for b0 in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[b0 : b0 + cfg.batch_size]]
                if cfg.augment:
                    batch = [augment(s, sample_augmentation(s, aug_rng, size), size) for s in batch]
                images, targets = prepare_batch(batch, size)
                with ad.ComputationRecord() as rec:
                    loss, parts = batch_loss(model, images, targets, cfg, latent_rng, "train")
                if not math.isfinite(parts["loss_total"]):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}")
                ad.backward(rec, loss)
                trainable = model.trainable()
                opt.step(trainable, {k: v.grad for k, v in trainable.items()}, lr, cfg.weight_decay)
                for k in sums:
                    sums[k] += parts[k] * len(batch)
            val = evaluate_loss(model, val_set, cfg)
            if not math.isfinite(val):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
            row = {"epoch": epoch, "lr": lr, **{k: v / len(train_set) for k, v in sums.items()}, "val_loss": val}
            rows.append(row)
            if log_path is not None:
                with open(log_path, "a", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerow([epoch] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
            if val < best.val_loss:
                best = Checkpoint(_snapshot(model.params), snapshot, epoch, val)
            log.info("epoch %d lr %.3g train %.4f val %.4f (%.2fs)", epoch, lr, row["loss_total"], val, time.perf_counter() - t0)
    except DivergenceError:
        if checkpoint_dir is not None and best.epoch >= 0:
            save_checkpoint(Path(checkpoint_dir) / "best", best)
        raise
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "best", best)
        save_checkpoint(Path(checkpoint_dir) / "last", Checkpoint(model.params, snapshot, cfg.epochs - 1, rows[-1]["val_loss"]))
    return TrainResult(best, rows, model.params)


def landmark_rmse(model: LandmarkModel, samples: list[Sample], mask_input: bool = False) -> float:
    """Root of the mean squared per-coordinate pixel error over ``samples``."""
    if mask_input:
        samples = [mask_to_input(s, model.config.organ_sizes) for s in samples]
    images, targets = prepare_batch(samples, model.config.image_size)
    pred = model.predict(images)
    return float(np.sqrt(np.mean((pred - targets * model.config.image_size) ** 2)))


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return copy.deepcopy(params)
