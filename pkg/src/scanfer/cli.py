"""``scanfer`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import (
    LABELS,
    ManifestError,
    PnmError,
    load_dataset,
    load_image,
    load_manifest,
    rebalance,
    synth_dataset,
)
from .explain import gradcam, render_heatmap
from .gradcheck import TOLERANCE, check_model_gradients
from .metrics import evaluate
from .model import FerModel, predict
from .optim import fit
from .tensor import inject_grad_fault

logger = logging.getLogger("scanfer")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CommandError(Exception):
    pass


def _load_split(path: str, size: int, config: RunConfig | None = None):
    if not path:
        return None
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"manifest not found: {p}")
    manifest = load_manifest(p)
    if len(manifest) == 0:
        raise CommandError(f"manifest is empty: {p}")
    if config is not None and config.rebalance != "none":
        manifest = rebalance(manifest, config.rebalance, config.rebalance_cap or None, seed=config.seed)
    for record in manifest.records:
        if not manifest.resolve(record).is_file():
            raise CommandError(f"image listed in {p} not found: {manifest.resolve(record)}")
    return load_dataset(manifest, size)


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if not config.train_manifest:
        raise CommandError("config must set train_manifest")
    size = config.backbone_config().input_size
    train = _load_split(config.train_manifest, size, config)
    val = _load_split(config.val_manifest, size)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = FerModel.create(config.fer_config(), seed=config.seed)
    result = fit(model, train, val, config=config.train_config())
    (out_dir / "history.tsv").write_text(result.history_tsv(), encoding="utf-8")
    save_checkpoint(out_dir / "best.ckpt", model, config, result.state,
                    meta={"best_epoch": result.best_epoch, "rng_state": result.rng_state})
    images, labels = val if val is not None else train
    report = evaluate(model, images, labels)
    (out_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    print(f"best_epoch={result.best_epoch}")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    size = ckpt.config.backbone_config().input_size
    images, labels = _load_split(args.manifest, size)
    report = evaluate(ckpt.model, images, labels)
    out = Path(args.out) if args.out else Path(str(args.ckpt) + ".eval.txt")
    out.write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_gradcam(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    size = ckpt.config.backbone_config().input_size
    try:
        image = load_image(args.image, size)
    except OSError as exc:
        raise CommandError(f"cannot read image {args.image}: {exc.strerror or exc}") from None
    predicted = int(predict(ckpt.model, image)[0])
    target = predicted if args.target is None else args.target
    heatmap = gradcam(ckpt.model, image, target)
    pgm, ppm = render_heatmap(heatmap, image)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    (out_dir / f"{stem}_gradcam_c{target}.pgm").write_bytes(pgm)
    (out_dir / f"{stem}_overlay_c{target}.ppm").write_bytes(ppm)
    print(f"predicted={predicted} ({LABELS[predicted]})")
    print(f"target={target} ({LABELS[target]})")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    if args.per_class < 1:
        raise CommandError("--per-class must be >= 1")
    manifest = synth_dataset(args.out, args.per_class, size=args.size, seed=args.seed)
    print(f"wrote {len(manifest)} images and {Path(args.out) / 'manifest.csv'}")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    config = load_config(args.config) if args.config else RunConfig().validate()
    seed = config.seed if args.seed is None else args.seed
    model = FerModel.create(config.fer_config(), seed=seed)
    rng = np.random.default_rng(seed + 1)
    size = config.backbone_config().input_size
    images = rng.uniform(size=(2, 3, size, size))
    labels = rng.integers(0, model.config.num_classes, size=2)
    if args.inject_fault:
        with inject_grad_fault(1.01):
            checks = check_model_gradients(model, images, labels, per_tensor=args.per_tensor, seed=seed)
    else:
        checks = check_model_gradients(model, images, labels, per_tensor=args.per_tensor, seed=seed)
    worst = 0.0
    for c in checks:
        worst = max(worst, c.max_rel_error)
        print(f"{c.name:28s} max_rel_error={c.max_rel_error:.3e} probed={c.probed} skipped={c.skipped}")
    print(f"max_rel_error={worst:.3e} tolerance={TOLERANCE:g}")
    return EXIT_OK if worst < TOLERANCE else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scanfer", description="Attention-based facial expression recognition.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="report path (default: <ckpt>.eval.txt)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="write Grad-CAM heatmap and overlay for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="target", type=int, choices=range(len(LABELS)), metavar="{0-6}")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("synth-data", help="generate the synthetic 7-class dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=40)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("check-grad", help="finite-difference check of every model parameter")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--per-tensor", type=int, default=16)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check_grad)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, ManifestError, CheckpointError, PnmError) as exc:
        print(f"scanfer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"scanfer {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
