#!/usr/bin/env python3
import argparse
import logging
import sys

from bvm_errors import (ConfigError, DiagnosticsError, EnvelopeViolationError,
                        ModelImplementationError, PriorRejectionError,
                        SingularInformationError, TargetEvaluationError)
from experiment_config import EXPERIMENTS, ExperimentConfig
from experiments import run_experiment, validate_model_params
from report_statistics import emit_report

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_DIAGNOSTICS = 3

SAMPLER_ERRORS = (DiagnosticsError, PriorRejectionError, EnvelopeViolationError,
                  ModelImplementationError, SingularInformationError, TargetEvaluationError)


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        prog="bvmlab",
        description="Posterior convergence experiments")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for experiment in EXPERIMENTS:
        sub = subparsers.add_parser(experiment, help=f"Run the {experiment} experiment")
        sub.add_argument('--config',
                         type=str,
                         help='JSON configuration file (defaults to the experiment preset)')
        sub.add_argument('--seed',
                         type=int,
                         help='Override: master seed')
        sub.add_argument('--jobs',
                         type=int,
                         help='Override: worker processes for replications')
        sub.add_argument('--out',
                         type=str,
                         help='Override: output directory')
        sub.add_argument('--verbose',
                         action='store_true',
                         help='Enable debug logging')

    validate = subparsers.add_parser("validate", help="Check a configuration file without running")
    validate.add_argument('--config',
                          type=str,
                          required=True,
                          help='JSON configuration file')
    validate.add_argument('--verbose',
                          action='store_true',
                          help='Enable debug logging')

    return parser.parse_args(argv)


def load_config(args) -> ExperimentConfig:
    """Configuration from --config (or the preset) with command-line overrides applied."""
    if args.command == "validate":
        config = ExperimentConfig.from_json(args.config)
        validate_model_params(config)
        return config
    if args.config:
        config = ExperimentConfig.from_json(args.config, args.command)
    else:
        config = getattr(ExperimentConfig, args.command)()
    config.verbose_logging = args.verbose
    if args.seed is not None:
        config.seed = args.seed
    if args.jobs is not None:
        config.jobs = args.jobs
    if args.out is not None:
        config.output_dir = args.out
    validate_model_params(config)
    return config


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = load_config(args)
    except (ConfigError, TypeError) as e:
        print(f"Error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        print(f"Configuration {args.config} is valid ({config.experiment}, "
              f"n={config.n_values}, {config.replications} replications)")
        return EXIT_OK

    print(f"\nStarting {config.experiment}...")
    print(f"Sample sizes: {config.n_values}")
    print(f"Replications: {config.replications}")
    print(f"Seed: {config.seed}")
    print(f"Jobs: {config.jobs}")
    print(f"Output: {config.output_dir}\n")

    try:
        report = run_experiment(config)
    except (ConfigError, TypeError) as e:
        print(f"Error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SAMPLER_ERRORS as e:
        print(f"Error: diagnostics failure: {e}", file=sys.stderr)
        return EXIT_DIAGNOSTICS

    report.print_results()
    try:
        written = emit_report(report, config.output_dir)
    except OSError as e:
        print(f"Error exporting report: {e}", file=sys.stderr)
        return EXIT_IO
    print("\nReport exported to:")
    for kind, path in written.items():
        print(f"  {kind}: {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
