"""Command line entry point: ``train``, ``eval``, ``grid`` and ``gradcheck``."""
from __future__ import annotations

import argparse
import sys

from . import experiment as E
from .data import evaluate, make_splits
from .model import load_checkpoint


def _train(args) -> int:
    cfg = E.parse_config(args.config)
    record = E.run_experiment(cfg, verbose=not args.quiet)
    print(record.summary())
    return 0


def _eval(args) -> int:
    cfg = E.parse_config(args.config)
    model = load_checkpoint(args.checkpoint)
    if model.config != cfg.model:
        print(f"warning: checkpoint config {model.config} differs from {cfg.model}", file=sys.stderr)
    _, _, val = make_splits(cfg.data, model.config.image_size, model.config.num_classes)
    score, per_class = evaluate(model, val)
    ious = " ".join(f"{v:.4f}" for v in per_class)
    print(f"miou={score:.4f} per_class=[{ious}]")
    return 0


def _grid(args) -> int:
    cfg = E.parse_config(args.config)
    values = E.parse_axis_values(args.axis, args.values)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    table = E.run_ablation_grid(cfg, args.axis, values, seeds, workers=args.workers)
    print(table.render(), end="")
    return 1 if table.failed() or table.missing() else 0


def _gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite

    results = run_suite(range(args.seeds))
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    for name, err in worst.items():
        status = "PASS" if err <= TOLERANCE else "FAIL"
        print(f"{status} {name:16s} max_rel_error={err:.3e}")
    return 0 if all(e <= TOLERANCE for e in worst.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokenmix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("config")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the config's validation split")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.set_defaults(func=_eval)

    p = sub.add_parser("grid", help="run an ablation grid")
    p.add_argument("config")
    p.add_argument("--axis", required=True,
                   help="augmentation, branch_design, rho, theta or a dotted config key")
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", required=True, help="comma-separated training seeds")
    p.add_argument("--workers", type=int, default=None,
                   help=f"parallel cells (default: ${E.WORKERS_ENV} or 1)")
    p.set_defaults(func=_grid)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
