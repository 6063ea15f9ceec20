"""Command line entry point: ``trajsynth <stage> --config run.yaml``.

Exit codes: 0 success, 2 configuration error, 3 missing dependency (an
upstream artifact or a Python package), 4 numerical failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_NUMERICAL = 4

HELP = {
    "simulate": "generate the procedural town world and split it into train/held-out sets",
    "ingest": "parse GeoLife-style .plt logs, window, resample and split them",
    "train-vae": "train the trajectory VAE",
    "segment": "build the KD-tree over latent means (conditions)",
    "train-diff": "train the conditional diffusion model",
    "generate": "sample synthetic trajectories for every guidance scale",
    "audit": "per-condition memorization audit",
    "mitigate": "Lipschitz estimate, ball-Laplace mitigation and re-audit of flagged conditions",
    "metrics": "utility metrics against held-out real data",
    "report": "metrics table, memorization boxplot data and plot images",
    "run": "run every stage in order (completed stages are skipped)",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajsynth",
        description="Conditional diffusion pipeline for synthetic trajectories with memorization audits.",
        epilog="The output directory can be overridden with the TRAJSYNTH_OUTPUT_DIR environment variable. "
               "Exit codes: 0 ok, 2 config error, 3 missing dependency, 4 numerical failure.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, text in HELP.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("-c", "--config", required=True, help="pipeline YAML file")
        p.add_argument("-o", "--output-dir", default=None,
                       help="output directory (overrides TRAJSYNTH_OUTPUT_DIR and the config)")
        p.add_argument("-f", "--force", action="store_true", help="rerun even when the manifest says up to date")
        p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    check = sub.add_parser("check-config", help="validate a config file and print it with defaults filled in")
    check.add_argument("-c", "--config", required=True, help="pipeline YAML file")
    check.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    return parser


def _run(args) -> int:
    try:
        import torch

        from . import pipeline
        from .config import ConfigError, PipelineConfig
        from .diffusion import NumericalError as DiffusionNumericalError
        from .lipschitz import AdjointMismatchError, NonFiniteProbeError
        from .vae import NumericalError as VaeNumericalError
    except ImportError as exc:
        print(f"error: missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY

    try:
        cfg = PipelineConfig.load(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "check-config":
        print(cfg.to_yaml(), end="")
        return EXIT_OK

    torch.use_deterministic_algorithms(True, warn_only=True)
    root = args.output_dir or cfg.output_dir()
    stages = pipeline.pipeline_order(cfg) if args.command == "run" else [args.command]
    numerical = (DiffusionNumericalError, VaeNumericalError, AdjointMismatchError, NonFiniteProbeError,
                 FloatingPointError)
    try:
        for name in stages:
            ran = pipeline.run_stage(cfg, name, force=args.force, root=root)
            if not ran:
                print(f"{name}: up to date")
    except pipeline.MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except pipeline.LockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except numerical as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ImportError as exc:
        print(f"error: missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return _run(args)


if __name__ == "__main__":
    sys.exit(main())
