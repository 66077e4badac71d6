"""Command-line entry point: ``cxrvit <command> [flags]``.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numeric abort, 5 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5

log = logging.getLogger("cxrvit")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _parse_floats(text: str, sep: str = ",") -> list[float]:
    try:
        return [float(v) for v in text.split(sep) if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers separated by {sep!r}, got {text!r}") from None


def _weights(text: str) -> list[float]:
    return _parse_floats(text.replace(":", ","))


def _grid(text: str) -> list[list[float]]:
    return [_parse_floats(item, ":") for item in text.split(",") if item.strip()]


# ---------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------
def cmd_train(args) -> int:
    from .fileio import atomic_write_text
    from .trainer import ConfigError, config_from_dict, run_config_dict, train_run

    path = Path(args.config)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for flag, key in (("epochs", "epochs"), ("seed", "seed"), ("batch_size", "batch_size")):
        if getattr(args, flag) is not None:
            raw[key] = getattr(args, flag)
    if args.lr is not None:
        raw.setdefault("optimizer", {})["lr"] = args.lr
    base = path.parent
    if args.output_dir is not None:
        raw["output_dir"] = str(Path(args.output_dir).resolve())
    cfg = config_from_dict(raw, base)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    atomic_write_text(Path(cfg.output_dir) / "config.json", _dump_json(run_config_dict(cfg)))
    result = train_run(cfg)
    print(f"best epoch {result.best.epoch} val_acc {result.best.val_accuracy:.4f}")
    print(f"checkpoint {Path(cfg.output_dir) / 'best.ckpt'}")
    return EXIT_OK


def _load_for_inference(checkpoint: str, manifest: str):
    from .checkpoint import load_checkpoint
    from .data import load_manifest
    from .imaging import AugmentPolicy
    from .models import model_from_checkpoint

    ckpt = load_checkpoint(checkpoint)
    model = model_from_checkpoint(ckpt)
    policy = AugmentPolicy(**ckpt.augment) if ckpt.augment else AugmentPolicy(target_size=model.cfg.img_size)
    return model, policy, load_manifest(manifest)


def _write_predictions(result, out: Path) -> None:
    from .ensemble import format_records
    from .fileio import atomic_write_text
    from .trainer import format_errors

    atomic_write_text(out, format_records(result.records))
    sidecar = out.with_name(out.stem + "_errors.csv")
    if result.errors:
        atomic_write_text(sidecar, format_errors(result.errors))
    elif sidecar.exists():
        sidecar.unlink()


def cmd_predict(args) -> int:
    from .trainer import evaluate

    model, policy, manifest = _load_for_inference(args.checkpoint, args.manifest)
    result = evaluate(model, manifest, policy, args.batch_size)
    out = Path(args.out)
    _write_predictions(result, out)
    print(f"wrote {len(result.records)} records to {out}; {len(result.errors)} unreadable")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import DataError
    from .fileio import atomic_write_text
    from .plotting import plot_confusion
    from .trainer import evaluate

    model, policy, manifest = _load_for_inference(args.checkpoint, args.manifest)
    result = evaluate(model, manifest, policy, args.batch_size)
    if result.metrics is None:
        raise DataError("no readable images in the manifest")
    out = Path(args.out)
    report = {"metrics": result.metrics.to_dict(), "records": len(result.records), "unreadable": len(result.errors)}
    atomic_write_text(out, _dump_json(report))
    _write_predictions(result, out.with_name(out.stem + "_records.csv"))
    plot_confusion(result.metrics, out.with_name(out.stem + "_confusion.png"))
    _print_metrics(result.metrics)
    return EXIT_OK


def _print_metrics(m) -> None:
    print(f"accuracy     {m.accuracy:.4f}")
    print(f"sensitivity  macro {m.sensitivity_macro:.4f}  micro {m.sensitivity_micro:.4f}")
    print(f"specificity  macro {m.specificity_macro:.4f}  micro {m.specificity_micro:.4f}")
    if m.undefined:
        print(f"undefined    {', '.join(m.undefined)}")


def cmd_ensemble(args) -> int:
    from .data import load_manifest
    from .ensemble import ensemble_records, format_records, normalized_weights, read_records, score_records
    from .fileio import atomic_write_text
    from .plotting import plot_confusion

    weights = args.weights if args.weights is not None else [1.0] * len(args.members)
    if len(weights) != len(args.members):
        raise _UsageError(f"{len(args.members)} members but {len(weights)} weights")
    if any(w <= 0 for w in weights):
        raise _UsageError("weights must be positive")
    members = [read_records(m) for m in args.members]
    mixed = ensemble_records(members, weights)
    metrics = score_records(mixed, load_manifest(args.truth).truth())
    out = Path(args.out)
    report = {
        "members": [Path(m).name for m in args.members],
        "weights_normalized": normalized_weights(weights).tolist(),
        "metrics": metrics.to_dict(),
    }
    atomic_write_text(out, _dump_json(report))
    atomic_write_text(out.with_name(out.stem + "_records.csv"), format_records(mixed))
    plot_confusion(metrics, out.with_name(out.stem + "_confusion.png"))
    _print_metrics(metrics)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .data import load_manifest
    from .ensemble import ensemble_sweep, format_sweep, read_records
    from .fileio import atomic_write_text
    from .plotting import plot_sweep

    names = args.names.split(",") if args.names else [Path(m).stem for m in args.members]
    if len(names) != len(args.members) or len(set(names)) != len(names):
        raise _UsageError("--names must give one distinct name per member")
    members = {n: read_records(m) for n, m in zip(names, args.members)}
    rows = ensemble_sweep(members, args.grid, load_manifest(args.truth).truth())
    out = Path(args.out)
    table = format_sweep(rows)
    atomic_write_text(out, table)
    plot_sweep(rows, out.with_name(out.stem + ".png"))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import autograd as ag
    from .models import build_model, make_config, model_gradcheck

    with ag.precision(np.float64):
        cfg = make_config(args.model, preset="toy")
        model = build_model(args.model, cfg, args.seed)
        rng = np.random.default_rng(args.seed)
        # move zero-initialised tensors off zero so every path carries gradient
        for _, p in model.named_parameters():
            p.data += rng.normal(0.0, 0.05, size=p.shape)
        x = rng.normal(size=(2, 3, cfg.img_size, cfg.img_size))
        errors = model_gradcheck(model, x, [0, 2], eps=args.eps, max_components=args.max_components, seed=args.seed)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{err:.3e}  {name}")
    status = "PASS" if worst < args.tol else "FAIL"
    print(f"{status} max relative error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


def cmd_augment_preview(args) -> int:
    from .fileio import atomic_write_bytes
    from .imaging import AugmentPolicy, encode_image, preview_pipeline, read_image, sample_rng, to_rgb
    from .plotting import plot_preview_grid

    img = read_image(args.image)
    policy = AugmentPolicy(
        target_size=args.size or img.shape[0], flip_prob=args.flip_prob, affine_prob=args.affine_prob,
        max_rotation_deg=args.max_rotation, max_translate_frac=args.max_translate, erase_prob=args.erase_prob,
    )
    out = Path(args.out)
    images, titles = [], []
    print("normalization skipped (preview mode)")
    for k in range(args.n):
        trace: list = []
        view = to_rgb(preview_pipeline(img, policy, sample_rng(args.seed, 0, k), trace))
        atomic_write_bytes(out / f"preview_{k:03d}.ppm", encode_image(view))
        steps = " -> ".join(f"{r.name}{_brief(r.params)}" for r in trace)
        print(f"preview_{k:03d}.ppm: {steps}")
        images.append(view)
        titles.append(_brief_title(trace))
    plot_preview_grid(images, out / "preview_grid.png", titles)
    return EXIT_OK


def _brief(params: dict) -> str:
    shown = {k: v for k, v in params.items() if v is not None and v is not False}
    if not shown:
        return ""
    return "(" + ", ".join(f"{k}={round(v, 2) if isinstance(v, float) else v}" for k, v in shown.items()) + ")"


def _brief_title(trace) -> str:
    parts = []
    for r in trace:
        if r.name == "hflip" and r.params["applied"]:
            parts.append("flip")
        elif r.name == "affine" and r.params["op"]:
            parts.append(r.params["op"])
        elif r.name == "erase" and r.params["box"]:
            parts.append("erase")
    return ", ".join(parts) or "identity"


def cmd_make_synthetic(args) -> int:
    from .data import make_synthetic

    manifest = make_synthetic(args.out, args.n, args.seed, args.size)
    print(f"wrote {len(manifest)} images and {Path(args.out) / 'manifest.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------
class _UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxrvit", description="Chest X-ray transformer classifiers and ensembling.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", help="train one model from a JSON run config")
    p.add_argument("--config", required=True, help="run-config JSON file")
    p.add_argument("--epochs", type=int, help="override epochs")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="override batch size")
    p.add_argument("--lr", type=float, help="override the base learning rate")
    p.add_argument("--output-dir", dest="output_dir", help="override the output directory")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("predict", cmd_predict, "write per-image class probabilities"),
        ("eval", cmd_eval, "score a checkpoint on a labelled manifest"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
        p.add_argument("--manifest", required=True, help="manifest CSV (path,label)")
        p.add_argument("--out", required=True, help="output CSV (predict) or JSON report (eval)")
        p.add_argument("--batch-size", dest="batch_size", type=int, default=64, help="inference batch size")
        p.set_defaults(func=func)

    p = sub.add_parser("ensemble", help="weighted-average member predictions and score them")
    p.add_argument("--members", nargs="+", required=True, help="prediction CSVs")
    p.add_argument("--weights", type=_weights, help="one positive weight per member, e.g. 2,1 or 2:1")
    p.add_argument("--truth", required=True, help="ground-truth manifest (image_id,label)")
    p.add_argument("--out", required=True, help="JSON metric report path")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("sweep", help="score members alone and under a grid of weightings")
    p.add_argument("--members", nargs="+", required=True, help="two or more prediction CSVs")
    p.add_argument("--names", help="comma-separated member names for the table")
    p.add_argument("--grid", type=_grid, default=[[1.0, 1.0], [2.0, 1.0]],
                   help="comma-separated weight tuples, e.g. 1:1,2:1 (default)")
    p.add_argument("--truth", required=True, help="ground-truth manifest")
    p.add_argument("--out", required=True, help="CSV table path (Models,Weights,Accuracy)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of a toy model in 64-bit mode")
    p.add_argument("--model", choices=("swin", "tnt"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="pass threshold")
    p.add_argument("--max-components", dest="max_components", type=int,
                   help="probe at most this many entries per tensor (default: all)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("augment-preview", help="write training-chain samples as P6 images")
    p.add_argument("--image", required=True, help="P5/P6 source image")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=8, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, help="resize target (default: source height)")
    p.add_argument("--flip-prob", dest="flip_prob", type=float, default=0.5)
    p.add_argument("--affine-prob", dest="affine_prob", type=float, default=0.25)
    p.add_argument("--erase-prob", dest="erase_prob", type=float, default=0.25)
    p.add_argument("--max-rotation", dest="max_rotation", type=float, default=10.0, help="degrees, at most 15")
    p.add_argument("--max-translate", dest="max_translate", type=float, default=0.05, help="fraction, at most 0.1")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("make-synthetic", help="write a seeded three-class P5 dataset and manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="images per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32, help="image side in pixels")
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def _exit_code(exc: BaseException) -> int | None:
    from .autograd import NonFiniteError
    from .checkpoint import CheckpointError
    from .data import DataError
    from .ensemble import IdMismatchError
    from .imaging import ImageDecodeError
    from .optim import NonFiniteGradientError
    from .trainer import ConfigError, NumericAbortError

    if isinstance(exc, CheckpointError):
        return EXIT_CHECKPOINT
    if isinstance(exc, (ConfigError, _UsageError)):
        return EXIT_CONFIG
    if isinstance(exc, (NumericAbortError, NonFiniteGradientError, NonFiniteError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, IdMismatchError, ImageDecodeError, OSError)):
        return EXIT_DATA
    if isinstance(exc, ValueError):
        # record-file and manifest parse failures
        return EXIT_DATA
    return None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"cxrvit {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
