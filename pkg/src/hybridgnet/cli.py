"""Command-line interface: ``hybridgnet {train,eval,infer,synth,gradcheck}``.

Exit codes are 0 on success, 2 for usage or configuration problems and 3 for
numeric failures (divergence, failed gradient checks).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data, gradcheck, metrics
from .data import ManifestError
from .model import HybridGNetConfig, build_model
from .training import (
    Checkpoint,
    DivergenceError,
    TrainConfig,
    landmark_rmse,
    load_checkpoint,
    model_from_checkpoint,
    train,
)

log = logging.getLogger("hybridgnet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

MODEL_VARIANTS = {
    "hybrid": {"kind": "hybrid", "igsc_levels": [6, 5]},
    "hybrid-1igsc": {"kind": "hybrid", "igsc_levels": [6]},
    "hybrid-noigsc": {"kind": "hybrid", "igsc_levels": []},
    "pca": {"kind": "pca"},
    "fc": {"kind": "fc"},
}


class UsageError(Exception):
    """Bad flags or configuration; reported with exit code 2."""


# -- configuration ------------------------------------------------------------


def _pick(cls, d: dict, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"unknown {where} option(s): {', '.join(sorted(unknown))}")
    return dict(d)


def build_run_config(args) -> dict:
    """Merge the JSON config file with command-line overrides and validate it."""
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
    unknown = set(raw) - {"model", "train", "dataset", "run_dir", "variant"}
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    model_cfg = _pick(HybridGNetConfig, raw.get("model", {}), "model")
    train_cfg = _pick(TrainConfig, raw.get("train", {}), "train")

    variant = args.model or raw.get("variant", "hybrid")
    model_cfg.update(MODEL_VARIANTS[variant])
    if args.pca_components is not None:
        model_cfg["pca_components"] = args.pca_components
    if variant == "pca" and not model_cfg.get("pca_components"):
        raise UsageError("--model pca requires --pca-components")
    overrides = {
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "lr_decay_every": args.lr_decay_every,
        "seed": args.seed,
    }
    train_cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.mask_input:
        train_cfg["mask_input"] = True
    if args.no_augment:
        train_cfg["augment"] = False
    env_seed = os.environ.get("HGN_SEED")
    if env_seed is not None:
        try:
            train_cfg["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"HGN_SEED must be an integer, got {env_seed!r}") from None

    dataset = args.dataset or raw.get("dataset")
    run_dir = args.run_dir or raw.get("run_dir")
    if not dataset or not run_dir:
        raise UsageError("both a dataset manifest and a run directory are required")
    try:
        mcfg = HybridGNetConfig(**model_cfg)
        mcfg.validate()
        tcfg = TrainConfig(**train_cfg)
        tcfg.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None
    return {
        "variant": variant,
        "dataset": str(dataset),
        "run_dir": str(run_dir),
        "model": mcfg.to_dict(),
        "train": asdict(tcfg),
    }


# -- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    mcfg = HybridGNetConfig.from_dict(cfg["model"])
    tcfg = TrainConfig(**cfg["train"])
    samples = _load_dataset(cfg["dataset"], mcfg.organ_sizes)
    run = Path(cfg["run_dir"])
    try:
        (run / "reports").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create run directory {run}: {e}") from None
    (run / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    model = build_model(mcfg, seed=tcfg.seed)
    log.info("training %s (%d parameters) on %s", cfg["variant"], model.num_parameters(), cfg["dataset"])
    try:
        train(samples, model, tcfg, cfg, log_path=run / "log.csv", checkpoint_dir=run / "checkpoints")
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        raise UsageError(str(e)) from None

    summary = {}
    for split in ("train", "val"):
        subset = [s for s in samples if s.split == split]
        if subset:
            summary[f"{split}_rmse_px"] = landmark_rmse(model, subset, tcfg.mask_input)
    (run / "reports" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for k, v in summary.items():
        print(f"{k} {v:.4f}")
    return EXIT_OK


def _load_dataset(path, organ_sizes) -> list[data.Sample]:
    try:
        return data.load_dataset(path, organ_sizes)
    except (ManifestError, OSError, ValueError) as e:
        raise UsageError(str(e)) from None


def _resolve_checkpoint(path) -> Checkpoint:
    path = Path(path)
    for candidate in (path, path / "checkpoints" / "best", path / "best"):
        if (candidate / "manifest.json").is_file():
            try:
                return load_checkpoint(candidate)
            except (OSError, ValueError, KeyError) as e:
                raise UsageError(f"cannot load checkpoint {candidate}: {e}") from None
    raise UsageError(f"no checkpoint found at {path}")


def _checkpoint_model(ckpt: Checkpoint):
    try:
        model = model_from_checkpoint(ckpt)
    except (TypeError, ValueError, KeyError) as e:
        raise UsageError(f"checkpoint config is invalid: {e}") from None
    mask_input = bool(ckpt.config.get("train", {}).get("mask_input", False))
    return model, mask_input


def _parse_fracs(text: str) -> list[float]:
    try:
        fracs = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --occlusion-fracs {text!r}") from None
    if any(not 0.0 <= f <= 1.0 for f in fracs):
        raise UsageError("occlusion fractions must lie in [0, 1]")
    return fracs


def cmd_eval(args) -> int:
    ckpt = _resolve_checkpoint(args.checkpoint)
    model, mask_input = _checkpoint_model(ckpt)
    organ_sizes = model.config.organ_sizes
    samples = _load_dataset(args.dataset, organ_sizes)
    if args.split != "all":
        samples = [s for s in samples if s.split == args.split]
    if not samples:
        raise UsageError(f"no samples in split {args.split!r}")
    size = model.config.image_size
    samples = [data.resize_to(s, size) for s in samples]
    if mask_input:
        samples = [data.mask_to_input(s, organ_sizes) for s in samples]
    fracs = _parse_fracs(args.occlusion_fracs) if args.occlusion_fracs else []

    preds = model.predict(np.stack([s.image for s in samples]))
    report = metrics.MetricReport()
    for s, p in zip(samples, preds):
        report.rows.append(metrics.evaluate_sample(s.source, p, s.landmarks, s.image.shape, s.spacing_mm, organ_sizes))
    out = Path(args.report)
    report.write_csv(out / "metrics.csv")
    rmse = float(np.sqrt(report.mean("mse")))
    print(f"samples {len(samples)} rmse_px {rmse:.4f} dice_lungs {report.mean('dice_lungs'):.4f} dice_heart {report.mean('dice_heart'):.4f}")
    if fracs:
        rows = metrics.occlusion_sweep(model.predict, samples, fracs, seed=args.seed, organ_sizes=organ_sizes)
        metrics.write_sweep_csv(rows, out / "occlusion.csv")
        for r in rows:
            print(f"occlusion {r.frac:g} dice {r.dice_mean:.4f} hd {r.hd_mean:.3f}")
    return EXIT_OK


def _read_input_image(path, mask_input: bool) -> np.ndarray:
    try:
        if mask_input:
            labels = data.read_pgm(path, normalize=False)
            if np.setdiff1d(np.unique(labels), [0, 1, 2]).size:
                raise ValueError(f"{path}: mask-input models expect labels 0/1/2")
            return labels / 2.0
        return data.read_pgm(path)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read image: {e}") from None


def cmd_infer(args) -> int:
    ckpt = _resolve_checkpoint(args.checkpoint)
    model, mask_input = _checkpoint_model(ckpt)
    image = _read_input_image(args.image, mask_input)
    size = model.config.image_size
    mat = data.affine_matrix(data.resize_params(image.shape, size), image.shape, (size, size))
    resized = data.resize_to(data.Sample(image, np.zeros((model.config.num_nodes, 2))), size).image
    pred = model.predict(resized)[0]
    if image.shape != (size, size):
        pred = data.transform_points(np.linalg.inv(mat), pred)
    try:
        data.write_landmarks(args.out, pred)
    except OSError as e:
        raise UsageError(f"cannot write {args.out}: {e}") from None
    if args.ctr:
        ctr = metrics.compute_ctr(pred, model.config.organ_sizes)
        print(f"ctr {ctr:.6f} {'normal' if metrics.ctr_is_normal(ctr) else 'abnormal'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get("HGN_SEED", 0))
    out = Path(args.out)
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    try:
        for sub in ("images", "masks", "landmarks"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot write to {out}: {e}") from None
    rng = np.random.default_rng(seed)
    samples = [data.synthesize_phantom(rng, args.size) for _ in range(args.count)]
    splits = data.assign_splits(args.count, rng)
    entries = []
    for i, (s, split) in enumerate(zip(samples, splits)):
        name = f"phantom_{i:04d}"
        data.write_pgm(out / "images" / f"{name}.pgm", s.image)
        data.write_pgm(out / "masks" / f"{name}.pgm", s.mask.astype(np.uint16), maxval=255)
        data.write_landmarks(out / "landmarks" / f"{name}.txt", s.landmarks)
        entries.append(
            {
                "image": f"images/{name}.pgm",
                "landmarks": f"landmarks/{name}.txt",
                "mask": f"masks/{name}.pgm",
                "spacing_mm": s.spacing_mm,
                "split": split,
            }
        )
    (out / "manifest.json").write_text(json.dumps(entries, indent=2) + "\n")
    counts = {k: splits.count(k) for k in data.SPLITS}
    print(f"wrote {args.count} phantoms to {out} (train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return EXIT_OK


def _inject_sign_flip(op: str) -> None:
    if op not in ad.BACKWARD:
        raise UsageError(f"unknown op {op!r} for fault injection")
    original = ad.BACKWARD[op]

    def flipped(ctx, g):
        return tuple(None if x is None else -x for x in original(ctx, g))

    ad.BACKWARD[op] = flipped


def cmd_gradcheck(args) -> int:
    if args.inject_fault:
        _inject_sign_flip(args.inject_fault)
    reports, elapsed = gradcheck.timed_suite(args.seed, args.trials)
    print(gradcheck.format_report(reports, elapsed))
    failed = [r.op for r in reports if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridgnet", description="Landmark-based chest X-ray segmentation with graph decoders.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a run directory")
    p.add_argument("--config", help="JSON file with model/train/dataset/run_dir sections")
    p.add_argument("--dataset", help="manifest.json of the dataset")
    p.add_argument("--run-dir", help="output run directory")
    p.add_argument("--model", choices=sorted(MODEL_VARIANTS), help="model variant (default hybrid)")
    p.add_argument("--mask-input", action="store_true", help="feed rasterized label masks instead of images")
    p.add_argument("--pca-components", type=int, help="number of shape components for --model pca")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-decay-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-augment", action="store_true", help="disable data augmentation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint", help="checkpoint directory or run directory")
    p.add_argument("dataset", help="manifest.json")
    p.add_argument("--split", default="test", choices=list(data.SPLITS) + ["all"])
    p.add_argument("--occlusion-fracs", help="comma-separated box fractions, e.g. 0,0.1,0.2")
    p.add_argument("--report", default="reports", help="output directory for CSV reports")
    p.add_argument("--seed", type=int, default=0, help="seed for occlusion box placement")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict landmarks for one image")
    p.add_argument("checkpoint")
    p.add_argument("image", help="PGM image")
    p.add_argument("--out", required=True, help="landmark file to write")
    p.add_argument("--ctr", action="store_true", help="print the cardiothoracic ratio")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, default=128, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
