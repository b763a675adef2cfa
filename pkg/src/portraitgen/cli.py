"""Command-line entry point for the talking-portrait pipeline."""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import ConfigError, PipelineConfig, load_config, write_example

_STAGE_COMMANDS = {
    "gen-data": "generate the synthetic corpus and target-person data",
    "train-syncexpert": "train the audio/landmark synchronization expert",
    "train-vae": "train the audio-to-motion generator",
    "train-postnet": "train the domain-adaptation post-net",
    "train-nerf": "train the head and torso radiance fields",
    "infer-motion": "predict landmark motion for held-out target audio",
    "render": "render frames from the trained fields",
    "metrics": "evaluate the pipeline and write the metrics report",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="portraitgen",
        description="synthetic talking-portrait pipeline: audio to landmark "
                    "motion to rendered frames")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI configuration file (defaults used "
                                        "for any key not given)")
        p.add_argument("--out", required=True, help="pipeline output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--quiet", action="store_true", help="suppress progress lines")

    for name, help_text in _STAGE_COMMANDS.items():
        common(sub.add_parser(name, help=help_text))
    run_all = sub.add_parser("run-all", help="run every stage in order")
    common(run_all)
    run_all.add_argument("--from-stage", choices=pipeline.STAGES,
                         help="resume from this stage, reusing earlier outputs")
    example = sub.add_parser("write-config",
                             help="write an INI file with every default value")
    example.add_argument("path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "write-config":
        write_example(args.path)
        print(f"wrote {args.path}")
        return 0
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.train.seed = args.seed
    log = (lambda *a, **k: None) if args.quiet else print
    try:
        if args.command == "run-all":
            pipeline.run_all(cfg, args.out, from_stage=args.from_stage, log=log)
        else:
            pipeline.run_stage(args.command, cfg, args.out, log=log)
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
