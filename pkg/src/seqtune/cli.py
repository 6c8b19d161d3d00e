"""Command-line entry point: ``seqtune {pretrain,experiment,schedule-preview,evaluate}``.

Exit codes: 0 success, 1 configuration error, 2 runtime/training error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data_io import SYNTHETIC_PRESETS, parse_synthetic_spec
from .errors import ConfigurationError, DataFormatError, SeqtuneError
from .evaluation import format_table
from .harness import ExperimentConfig, cmd_evaluate, cmd_experiment, cmd_pretrain, cmd_schedule_preview
from .model import DenseNetConfig
from .scheduler import MODE_ORDER

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("seqtune")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _modes(text: str) -> list[str]:
    return [mode for mode in text.split(",") if mode.strip()]


def _schedule_args(p, defaults=True):
    p.add_argument("--epochs", type=int, default=30, help="total epochs (default 30)")
    p.add_argument("--step-epochs", type=int, default=2, help="epochs per sequential step (default 2)")
    p.add_argument("--unfreeze-per-step", type=int, default=1, help="groups unfrozen per step (default 1)")


def _model_args(p):
    p.add_argument("--image-size", type=int, default=None, help="input side length (default: from data)")
    p.add_argument("--growth-rate", type=int, default=4)
    p.add_argument("--layers-per-block", default="2,2", help="comma-separated dense layers per block")
    p.add_argument("--stem-channels", type=int, default=8)


def _model_config(args, image_size: int) -> DenseNetConfig:
    layers = tuple(int(v) for v in args.layers_per_block.split(",") if v.strip())
    return DenseNetConfig(input_size=(image_size, image_size), initial_conv=(3, 1, args.stem_channels),
                          num_blocks=len(layers), layers_per_block=layers, growth_rate=args.growth_rate)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqtune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train a network from scratch on the synthetic source task")
    p.add_argument("--synthetic", default="high", help=f"target spec: preset {sorted(SYNTHETIC_PRESETS)} "
                   "with optional ';key=value' overrides; the source task is derived from it")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weights", type=Path, required=True, help="output weights file")
    _model_args(p)

    p = sub.add_parser("experiment", help="2-fold CV of the fine-tuning modes with pooled reports")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", help="synthetic target spec (see pretrain)")
    src.add_argument("--data-index", type=Path, help="dataset index CSV")
    _schedule_args(p)
    p.add_argument("--mode", type=_modes, default=[mode.value for mode in MODE_ORDER],
                   help="comma-separated subset of FT_ALL,FT_FC,SFT (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", type=Path, help="pretrained weights (default: pretrain inline)")
    p.add_argument("--pretrain-epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--class-weights", default="INVERSE_FREQUENCY", choices=["INVERSE_FREQUENCY", "UNIFORM"])
    p.add_argument("--out-dir", type=Path, required=True)
    _model_args(p)

    p = sub.add_parser("schedule-preview", help="print the unfreeze timeline")
    _schedule_args(p)
    p.add_argument("--groups", type=int, required=True, help="number of layer groups")
    p.add_argument("--mode", default="SFT")

    p = sub.add_parser("evaluate", help="metrics from a saved predictions CSV")
    p.add_argument("predictions", type=Path)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--name", default="evaluated", help="tag used in output file names")
    return parser


def _run(args) -> int:
    if args.command == "schedule-preview":
        print(cmd_schedule_preview(args.epochs, args.step_epochs, args.unfreeze_per_step, args.groups, args.mode))
        return EXIT_OK

    if args.command == "evaluate":
        report = cmd_evaluate(args.predictions, args.out_dir, args.name)
        print(format_table([report]))
        return EXIT_OK

    if args.command == "pretrain":
        spec = parse_synthetic_spec(args.synthetic)
        model = _model_config(args, args.image_size or spec.image_size)
        result = cmd_pretrain(spec, model, args.epochs, args.weights, seed=args.seed, learning_rate=args.lr)
        print(f"source held-out accuracy: {result.source_accuracy:.4f}")
        print(f"weights written to {args.weights}")
        return EXIT_OK

    spec = parse_synthetic_spec(args.synthetic) if args.synthetic else None
    if spec is not None and args.image_size and args.image_size != spec.image_size:
        spec = parse_synthetic_spec(f"{args.synthetic};image_size={args.image_size}")
    size = args.image_size or (spec.image_size if spec else 16)
    config = ExperimentConfig(
        out_dir=args.out_dir, synthetic=spec, data_index=args.data_index, model=_model_config(args, size),
        modes=tuple(args.mode), epochs=args.epochs, step_epochs=args.step_epochs,
        unfreeze_per_step=args.unfreeze_per_step, learning_rate=args.lr, momentum=args.momentum,
        batch_size=args.batch_size, class_weight_policy=args.class_weights, weights=args.weights,
        pretrain_epochs=args.pretrain_epochs, seed=args.seed,
    )
    reports, manifest = cmd_experiment(config)
    print(format_table([reports[mode.value] for mode in MODE_ORDER if mode.value in reports]))
    print(f"artifacts written to {config.out_dir}")
    if manifest["errors"]:
        for mode, message in manifest["errors"].items():
            print(f"{mode} failed: {message}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigurationError, DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SeqtuneError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
