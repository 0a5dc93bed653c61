"""
Main entry point for the SVD-Cache experiment harness.
"""

import argparse
import json
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Add the src directory to the path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.config import Config
from src.error_handler import ConfigError, SvdCacheError, ValidationError, configure_package_logging, setup_logger
from src.harness import cmd_analyze, cmd_compare, cmd_decompose, cmd_run, cmd_selftest, cmd_synth

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

logger = setup_logger('svdcache.main')


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to a JSON experiment configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="Override a config value by dotted key, e.g. strategy.tau=0.9 (repeatable)")
    common.add_argument("--seed", dest="seeds", action="append", type=int, default=[],
                        help="Seed to run (repeatable); replaces the config seed list")
    common.add_argument("--jobs", type=int, help="Parallel grid cells")
    common.add_argument("--out", help="Output directory (default: config output_dir, $SVDCACHE_OUT, ./svdcache_out)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--log-file", help="Also write logs to this file")

    parser = argparse.ArgumentParser(description="SVD-Cache subspace feature caching harness")
    subparsers = parser.add_subparsers(dest="command", help="Command to run")
    subparsers.add_parser("decompose", parents=[common], help="Build and store reference bases")
    subparsers.add_parser("synth", parents=[common], help="Write generated trajectories to SVCT files")
    subparsers.add_parser("run", parents=[common], help="Run the configured caching strategy")
    subparsers.add_parser("compare", parents=[common], help="Rank strategies and sweep tau")
    subparsers.add_parser("analyze", parents=[common], help="Emit PCA traces, basis similarity and smoothness CSVs")
    selftest_parser = subparsers.add_parser("selftest", parents=[common], help="Run invariant suites")
    selftest_parser.add_argument("--inject-corruption", action="store_true",
                                 help="Corrupt the checksum suite's basis fixture")
    return parser


def load_config(args: argparse.Namespace) -> Config:
    config = Config.from_file(args.config) if args.config else Config({})
    overrides = list(args.overrides)
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    return config.apply_overrides(overrides).with_seeds(args.seeds)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_VALIDATION

    try:
        configure_package_logging(args.log_level, args.log_file)
        if args.command == "selftest":
            results = cmd_selftest(args.inject_corruption)
            print(json.dumps(results, indent=2))
            return EXIT_OK if all(r['passed'] for r in results) else EXIT_RUNTIME

        config = load_config(args)
        out_dir = config.get_output_dir(args.out)
        if args.command == "decompose":
            paths = cmd_decompose(config, out_dir)
            print(f"Wrote {len(paths) - 1} basis files and manifest {paths[-1]}")
        elif args.command == "synth":
            for path in cmd_synth(config, out_dir):
                print(path)
        elif args.command == "run":
            for summary in cmd_run(config, out_dir):
                print(f"seed {summary['seed']}: mean error {summary['mean_rel_error']:.4e}, "
                      f"mean similarity {summary['mean_similarity']:.4f}, speedup {summary['speedup']:.2f}x")
        elif args.command == "compare":
            print(cmd_compare(config, out_dir).to_string(index=False))
        elif args.command == "analyze":
            for name, path in sorted(cmd_analyze(config, out_dir).items()):
                print(f"{name}: {path}")
        return EXIT_OK
    except (ValidationError, ConfigError, FileNotFoundError) as e:
        logger.error(f"{args.command} rejected its input: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SvdCacheError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"{args.command} crashed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
