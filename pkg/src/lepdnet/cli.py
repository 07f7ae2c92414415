"""Command-line entry point: synth, train, evaluate, predict, cam, ablate.

Results go to stdout, logs to stderr. Exit codes: 0 success, 2 argument or
configuration error, 3 runtime, data or checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataio import LABELS, ORGANS, encode_location, load_dataset, load_image, resize_image
from .errors import CheckpointError, ConfigError, DataError, DomainError
from .synthgen import CLINICAL_RATIO, MODES, SynthSpec, generate_dataset, scaled_counts

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("lepdnet")


def _config(args):
    from .pipeline.config import TrainConfig, load_config

    return load_config(args.config) if getattr(args, "config", None) else TrainConfig()


def _emit(obj, sort_keys: bool = True) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=sort_keys, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    base = _config(args).synth_spec()
    if args.clinical_total is not None:
        counts = scaled_counts(CLINICAL_RATIO, args.clinical_total)
    elif args.n_per_class is not None:
        counts = args.n_per_class
    else:
        counts = base.n_per_class
    spec = SynthSpec(
        n_per_class=counts,
        image_size=args.size if args.size is not None else base.image_size,
        seed=args.seed if args.seed is not None else base.seed,
        mode=args.mode or base.mode,
        distractor_density=base.distractor_density if args.distractor_density is None else args.distractor_density,
        noise_sigma=base.noise_sigma if args.noise_sigma is None else args.noise_sigma,
        workers=args.workers,
    )
    root = generate_dataset(spec, args.out)
    _emit({"out": str(root), "counts": spec.counts(), "mode": spec.mode, "seed": spec.seed})
    return EXIT_OK


def _train_config(args):
    cfg = _config(args)
    changes = {}
    for flag, key in (("no_cre", "cre"), ("no_sle", "sle"), ("no_fpd", "fpd")):
        if getattr(args, flag):
            changes[key] = False
    if args.deterministic:
        changes["deterministic"] = True
    if args.epochs is not None:
        changes["total_epochs"] = args.epochs
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "average", None):
        changes["average"] = args.average
    return cfg.replace(**changes)


def cmd_train(args) -> int:
    from .pipeline.train import run_cv

    cfg = _train_config(args)
    records = load_dataset(args.data)
    result = run_cv(records, cfg, args.out, only_fold=args.fold)
    report = result.report
    _emit({"run": str(args.out), "switches": report["switches"], "aggregate": report["aggregate"],
           "table_row": report["table_row"]})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .pipeline.train import evaluate_run, write_report

    report = evaluate_run(load_dataset(args.data), args.run)
    if args.out:
        write_report(report, args.out)
    _emit({"aggregate": report["aggregate"], "pooled": report["pooled"], "table_row": report["table_row"],
           "folds": [{"fold": f["fold"], "metrics": f["metrics"]} for f in report["folds"]]})
    return EXIT_OK


def _location(args) -> np.ndarray:
    return encode_location(args.organ, args.pos_x, args.pos_y)


def cmd_predict(args) -> int:
    from .pipeline.train import predict

    location = _location(args)
    probs = predict(args.model, load_image(args.image), location)
    if args.json:
        # class order, not alphabetical
        _emit({"probabilities": dict(zip(LABELS, map(float, probs))), "prediction": LABELS[int(probs.argmax())]},
              sort_keys=False)
    else:
        for name, p in zip(LABELS, probs):
            sys.stdout.write(f"{name}\t{p:.6f}\n")
    return EXIT_OK


def _target_index(target: str, probs: np.ndarray) -> int:
    return int(np.argmax(probs)) if target == "predicted" else LABELS.index(target)


def cmd_cam(args) -> int:
    from .model import load_checkpoint
    from .pipeline.cam import cam, save_overlay
    from .pipeline.train import cam_records, fold_dirs, predict
    from .pipeline.config import TrainConfig

    if args.model:
        for name in ("image", "pos_x", "pos_y", "organ", "out"):
            if getattr(args, name) is None:
                raise ConfigError(f"cam --model needs --{name.replace('_', '-')}")
        model = load_checkpoint(args.model)
        location = _location(args)
        image = resize_image(load_image(args.image), model.cfg.input_size)
        k = _target_index(args.target, predict(model, image, location))
        _, over = cam(model, image, location, k)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_overlay(args.out, over)
        _emit({"paths": [str(args.out)], "target": LABELS[k]})
        return EXIT_OK

    if not args.data:
        raise ConfigError("cam --run needs --data")
    from .dataio import make_folds
    from .model import read_checkpoint

    records = load_dataset(args.data)
    out_dir = Path(args.out) if args.out else Path(args.run) / "cams"
    paths = []
    for k, path in fold_dirs(args.run):
        if args.fold is not None and k != args.fold:
            continue
        header, _ = read_checkpoint(path / "checkpoint.bin")
        cfg = TrainConfig(**header["extra"]["train_config"])
        folds = make_folds(records, cfg.folds, seed=cfg.seed, group_by_patient=cfg.group_by_patient)
        test_ids = folds.test_ids(k)
        test = [r for r in records if r.id in test_ids][: args.limit]
        paths += cam_records(load_checkpoint(path / "checkpoint.bin"), test, out_dir, args.target)
    if not paths:
        raise CheckpointError(f"{args.run}: no matching fold checkpoints")
    _emit({"paths": [str(p) for p in paths]})
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline.train import run_ablation

    cfg = _config(args)
    changes = {}
    if args.deterministic:
        changes["deterministic"] = True
    if args.epochs is not None:
        changes["total_epochs"] = args.epochs
    if args.seed is not None:
        changes["seed"] = args.seed
    rows = run_ablation(load_dataset(args.data), cfg.replace(**changes), args.out)
    _emit({"rows": rows})
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _unit(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} outside [0, 1]")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _add_location(p, required: bool) -> None:
    p.add_argument("--pos-x", type=_unit, required=required, help="normalized stone x in [0, 1]")
    p.add_argument("--pos-y", type=_unit, required=required, help="normalized stone y in [0, 1]")
    p.add_argument("--organ", choices=ORGANS, required=required)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lepdnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    parser.add_argument("-q", "--quiet", action="store_true", help="only errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    counts = p.add_mutually_exclusive_group()
    counts.add_argument("--n-per-class", type=_positive_int)
    counts.add_argument("--clinical-total", type=_positive_int,
                        help="imbalanced set with the clinical class ratio, scaled to this total")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=_positive_int)
    p.add_argument("--distractor-density", type=_unit)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--config", help="key = value file; synth_* keys supply defaults")
    p.set_defaults(func=cmd_synth)

    def training_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--epochs", type=_positive_int, help="override total_epochs")
        p.add_argument("--seed", type=int, help="override seed")

    p = sub.add_parser("train", help="cross-validated training")
    training_flags(p)
    p.add_argument("--fold", type=int, help="train only this fold")
    p.add_argument("--no-cre", action="store_true")
    p.add_argument("--no-sle", action="store_true")
    p.add_argument("--no-fpd", action="store_true")
    p.add_argument("--average", choices=("macro", "micro", "weighted"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-score a run's fold checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--out", help="directory for report.json and curves")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="class probabilities for one patch")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    _add_location(p, required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cam", help="class activation map overlays")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="single checkpoint (with --image and location)")
    src.add_argument("--run", help="run directory; maps every held-out patch")
    p.add_argument("--data")
    p.add_argument("--image")
    _add_location(p, required=False)
    p.add_argument("--fold", type=int)
    p.add_argument("--limit", type=_positive_int)
    p.add_argument("--target", default="predicted", choices=("predicted",) + LABELS)
    p.add_argument("--out", help="PNG path (--model) or directory (--run)")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("ablate", help="all CRE/SLE/FPD combinations")
    training_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"lepdnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FloatingPointError, OSError) as exc:
        print(f"lepdnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
