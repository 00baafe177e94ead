"""zdmix CLI - run verification suites and turn their reports into plot data."""

import logging
import sys
from pathlib import Path

import click
import yaml

EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

TOOL_HELP = """\
zdmix — mixing-rate expansions for Z^d-extensions.

Runs reproducible verification suites on exact Markov toy models and on
periodic Sinai billiards, and writes CSV reports for each run.

\b
COMMANDS
────────
  zdmix run [CONFIG]            Run the suite named by CONFIG
  zdmix plotdata REPORT_DIR     Write REPORT_DIR/plotdata.csv from report.csv
  zdmix export [CONFIG]         Write orbit traces (table) or oracle laws (model)
  zdmix print-config-schema     Print the config schema as YAML

\b
EXPERIMENTS
───────────
  verify-tensor         tensor identities and Gaussian derivatives
  verify-toy            expansion coefficients against an exact Markov oracle
  verify-llt            local limit theorem error on a Markov model
  verify-mixing         finite-horizon billiard: invariance, Σ², n·C_n trends
  verify-coefficients   coefficient set of one pair (f, g), coboundary algebra
  verify-infinite       corridors, n log n scaling and free-flight tail

\b
RUN OUTPUT
──────────
  Each run gets a fresh directory <output>/<config hash>-<UTC time>/:
  \b
  report.csv    statistic,n,value,stderr,batches,seed
  summary.txt   PASS/FAIL per criterion with measured values
  meta.txt      config hash, seed, package versions, run metadata
  \b
  zdmix export writes trace.bin (+ orbit.csv for <= 100 orbits) for a
  table config, or oracle.csv with exact laws of S_n for a model config.

  The same config and seed produce a byte-identical report.csv,
  whatever the worker count.

\b
CONFIG FILE FORMAT
──────────────────
  Config resolution order:
    1. CONFIG argument (explicit path)
    2. zdmix.yaml / zdmix.yml / .zdmix.yaml / .zdmix.yml in CWD
    3. ~/.zdmix/config.yaml (global)

  Keys may be nested or flat and dotted (table.flight_cap: 1000000).
  Strings may reference ${VAR} from env_file or the environment.

  \b
  experiment: verify-mixing
  seed: 7
  workers: 8                      # default: $WORKERS, else 1
  output: reports                 # relative to this file
  table:
    preset: finite                # finite | infinite | obstacles: [...]
  ladder: [25, 50, 100]
  budget:
    trajectories: 10000000
    batches: 64

  zdmix print-config-schema lists every key.

\b
EXIT STATUS
───────────
  0   every criterion passed
  1   at least one criterion failed
  2   config error
  3   runtime error
"""


@click.group(help=TOOL_HELP, context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="zdmix")
@click.option("-v", "--verbose", is_flag=True, default=False, help="Log at DEBUG level.")
def main(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("run")
@click.argument("config_file", required=False)
@click.option("-o", "--output", default=None, help="Override the output directory.")
@click.option("-w", "--workers", type=int, default=None, help="Override the worker count.")
def run(config_file, output, workers):
    """Run the suite named by CONFIG and write its report."""
    from zdmix.core import (
        ConfigError,
        ZdmixError,
        create_run_dir,
        load_config,
        load_env,
        resolve_config_path,
        save_meta,
        save_report,
        save_summary,
        validate_config,
    )
    from zdmix.executor import run_suite

    try:
        cfg = _load_experiment(
            config_file, output, workers, resolve_config_path, load_config, load_env,
            validate_config, ConfigError,
        )
    except ConfigError as e:
        click.echo(f"ERROR: {e}", err=True)
        sys.exit(EXIT_CONFIG)

    try:
        result = run_suite(cfg)
    except ConfigError as e:
        click.echo(f"ERROR: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except ZdmixError as e:
        click.echo(f"ERROR: {type(e).__name__}: {e}", err=True)
        sys.exit(EXIT_RUNTIME)
    except Exception as e:
        click.echo(f"ERROR: unexpected {type(e).__name__}: {e}", err=True)
        sys.exit(EXIT_RUNTIME)

    try:
        run_dir = create_run_dir(cfg.output, cfg.hash())
        save_report(result.rows, run_dir)
        save_summary(result.criteria, run_dir)
        save_meta(result.meta, run_dir)
    except OSError as e:
        click.echo(f"ERROR: cannot write report: {e}", err=True)
        sys.exit(EXIT_RUNTIME)
    _print_summary(result, run_dir)
    if not result.passed:
        sys.exit(EXIT_FAILED)


@main.command("export")
@click.argument("config_file", required=False)
@click.option("-o", "--output", default=None, help="Override the output directory.")
@click.option("-n", "--steps", type=int, default=100, show_default=True,
              help="Collision steps per traced orbit.")
@click.option("-t", "--trajectories", type=int, default=1000, show_default=True,
              help="Number of traced orbits.")
def export(config_file, output, steps, trajectories):
    """Persist orbit traces or exact oracle laws for CONFIG."""
    from zdmix.core import (
        ConfigError,
        ZdmixError,
        create_run_dir,
        load_config,
        load_env,
        resolve_config_path,
        validate_config,
    )
    from zdmix.executor import export_traces

    try:
        cfg = _load_experiment(
            config_file, output, None, resolve_config_path, load_config, load_env,
            validate_config, ConfigError,
        )
        run_dir = create_run_dir(cfg.output, cfg.hash())
        paths = export_traces(cfg, run_dir, steps, trajectories)
    except ConfigError as e:
        click.echo(f"ERROR: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except ZdmixError as e:
        click.echo(f"ERROR: {type(e).__name__}: {e}", err=True)
        sys.exit(EXIT_RUNTIME)
    except OSError as e:
        click.echo(f"ERROR: cannot write export: {e}", err=True)
        sys.exit(EXIT_RUNTIME)
    except Exception as e:
        click.echo(f"ERROR: unexpected {type(e).__name__}: {e}", err=True)
        sys.exit(EXIT_RUNTIME)
    for path in paths:
        click.echo(f"Written: {path}")


@main.command("plotdata")
@click.argument("report_dir", type=click.Path(file_okay=False))
def plotdata(report_dir):
    """Write REPORT_DIR/plotdata.csv (curve,n,measured,predicted,stderr)."""
    from zdmix.core import ConfigError, emit_plotdata

    try:
        path = emit_plotdata(report_dir)
    except ConfigError as e:
        click.echo(f"ERROR: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(f"Plot data written: {path}")


@main.command("print-config-schema")
def print_config_schema():
    """Print every config key with its type, default and range."""
    from zdmix.core import CONFIG_SCHEMA

    click.echo(yaml.safe_dump(CONFIG_SCHEMA, sort_keys=False, allow_unicode=True), nl=False)


def _load_experiment(
    config_file, output, workers, resolve_config_path_fn, load_config_fn, load_env_fn,
    validate_fn, config_error,
):
    """Resolve, load and validate a config, applying CLI overrides."""
    path = resolve_config_path_fn(config_file)
    if path is None:
        if config_file:
            raise config_error(f"config not found: {config_file}")
        raise config_error(
            "no config given and none found "
            "(searched zdmix.yaml, .zdmix.yaml in CWD and ~/.zdmix/config.yaml)"
        )
    config = load_config_fn(path)
    env = load_env_fn(config.get("env_file"), base_dir=config["_config_dir"])
    if output is not None:
        config["output"] = str(Path(output).resolve())
    if workers is not None:
        config["workers"] = workers
    return validate_fn(config, env)


def _print_summary(result, run_dir):
    width = max((len(c.name) for c in result.criteria), default=0)
    for c in result.criteria:
        status = "PASS" if c.passed else "FAIL"
        click.echo(f"{status}  {c.name.ljust(width)}  {c.detail}")
    passed = sum(1 for c in result.criteria if c.passed)
    click.echo(f"\n{passed}/{len(result.criteria)} criteria passed")
    click.echo(f"Report: {run_dir}")
