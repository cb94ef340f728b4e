"""Command-line entry point: ``noduledet <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, PipelineConfig, load_config
from .ctdata import DataError

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, work: bool = True) -> None:
    p.add_argument("--config", type=Path, help="pipeline config file ([section] / key = value)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--data", type=Path, default=Path("data"), help="dataset directory (default: data)")
    if work:
        p.add_argument("--work", type=Path, default=Path("work"), help="artifact directory (default: work)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noduledet", description="Two-stage lung nodule detection on CT volumes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a phantom dataset")
    _common(p, work=False)
    p.add_argument("--seed", type=int, help="dataset seed (overrides data.seed)")
    p.add_argument("--out", type=Path, help="output directory (alias for --data)")

    for name, text in (("sample", "draw stage-1 patch centers"),
                       ("train-seg", "train the segmentation network"),
                       ("mine", "hard-mining round and fine-tuning"),
                       ("detect", "two-pass prediction, writes candidate CSVs")):
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("train-clf", help="train false-positive reduction classifiers")
    _common(p)
    p.add_argument("--variant", action="append", help="train only this variant (repeatable)")
    p.add_argument("--pooling", choices=("dual", "central", "max"))
    p.add_argument("--no-random-mask", action="store_true", help="disable random mask augmentation")

    p = sub.add_parser("evaluate", help="FROC and CPM of the ensemble, or of a given candidates CSV")
    _common(p)
    p.add_argument("--candidates", type=Path, help="candidates CSV (direct mode)")
    p.add_argument("--annotations", type=Path, help="annotation CSV (direct mode)")
    p.add_argument("--score", default="clf_prob", choices=("clf_prob", "seg_score"))
    p.add_argument("--out", type=Path, help="report directory for direct mode (default: --work)")

    p = sub.add_parser("ablate", help="run a grid over the ablation flags")
    _common(p)
    p.add_argument("--axis", action="append", default=[], metavar="SECTION.KEY=V1,V2",
                   help="ablation axis (repeatable; default: pooling x hard mining x random mask)")

    p = sub.add_parser("run", help="all stages from synth to evaluate")
    _common(p)
    return parser


def _overrides(items) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = _overrides(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides["data.seed"] = str(args.seed)
    if getattr(args, "pooling", None):
        overrides["classifier.pooling"] = args.pooling
    if getattr(args, "no_random_mask", False):
        overrides["classifier.random_mask"] = "false"
    return cfg.with_overrides(overrides) if overrides else cfg


def _dispatch(args) -> int:
    if args.command == "evaluate" and (args.candidates or args.annotations):
        if not (args.candidates and args.annotations):
            raise ConfigError("direct evaluation needs both --candidates and --annotations")
        _, report = pipeline.evaluate_files(args.candidates, args.annotations, args.out or args.work, args.score)
        print(pipeline.format_cpm_table([report]), end="")
        return EXIT_OK

    cfg = _config(args)
    if args.command == "synth":
        pipe = pipeline.Pipeline(cfg, args.out or args.data, args.out or args.data)
        ids = pipe.synth()
        print(f"wrote {len(ids)} phantom scans to {pipe.data_dir}")
        return EXIT_OK
    if args.command == "ablate":
        axes = {}
        for item in args.axis:
            key, sep, values = item.partition("=")
            if not sep:
                raise ConfigError(f"expected SECTION.KEY=V1,V2, got {item!r}")
            axes[key.strip()] = tuple(v.strip() for v in values.split(","))
        out = pipeline.ablate(cfg, args.data, args.work, axes or None)
        print(out.read_text(encoding="utf-8"), end="")
        return EXIT_OK

    pipe = pipeline.Pipeline(cfg, args.data, args.work)
    if args.command == "run":
        pipe.run()
    elif args.command == "train-clf":
        pipe.train_clf(args.variant)
    elif args.command == "evaluate":
        pipe.evaluate()
    else:
        pipe.run((args.command,))
    if args.command in ("run", "evaluate"):
        print((pipe.work_dir / "cpm_report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"noduledet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataError, ValueError, RuntimeError) as exc:
        print(f"noduledet: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
