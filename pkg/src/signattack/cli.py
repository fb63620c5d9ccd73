"""Command-line entry point: ``signattack {train,attack,sweep,explain,eval}``.

Images other than binary PPM (P6) must be converted first, e.g. with
``convert sign.png -depth 8 sign.ppm`` or Pillow.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="signattack",
        description="Train a sign classifier, attack it and explain its predictions.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required,
                       help="experiment file (key = value sections)")
        p.add_argument("--weights", type=Path, help="weight file (default: OUT/model.sgn)")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=int, help="override the experiment seed")

    common(sub.add_parser("train", help="train and write weights, metrics.csv, confusion.csv"))
    common(sub.add_parser("attack", help="run configured attacks, write report.md/report.csv"))
    common(sub.add_parser("sweep", help="success rate against epsilon, write sweep.csv"))
    common(sub.add_parser("eval", help="test accuracy and confusion.csv"))
    ex = sub.add_parser("explain", help="Grad-CAM triptych for one PPM image")
    common(ex, config_required=False)
    ex.add_argument("image", type=Path, help="binary PPM (P6) image")
    ex.add_argument("--class", dest="target_class", type=int,
                    help="class to explain (default: predicted class)")
    ex.add_argument("--layer", help="conv layer name (default: last conv layer)")
    ex.add_argument("--output", type=Path, help="triptych path (default: OUT/explain.ppm)")
    return parser


def run(args: argparse.Namespace) -> None:
    cfg = harness.load_config(args.config) if args.config else None
    if cfg is not None and args.seed is not None:
        cfg.with_seed(args.seed)
    if args.verb == "train":
        harness.cmd_train(cfg, args.out, args.weights)
    elif args.verb == "attack":
        rows = harness.cmd_attack(cfg, args.out, args.weights)
        wins = sum(r.success for r in rows)
        print(f"{wins}/{len(rows)} attacks succeeded; report at {args.out / 'report.md'}")
    elif args.verb == "sweep":
        harness.cmd_sweep(cfg, args.out, args.weights)
    elif args.verb == "eval":
        harness.cmd_eval(cfg, args.out, args.weights)
    elif args.verb == "explain":
        weights = harness.weights_path(args.out, args.weights)
        output = args.output or args.out / "explain.ppm"
        print(harness.cmd_explain(weights, args.image, output, args.target_class,
                                  args.layer, cfg))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"signattack: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
