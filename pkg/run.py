# Must load_dotenv before everything else.
from dotenv import load_dotenv; load_dotenv()

import logging
import os
import sys

def ensure_pythonpath():
    pythonpath = os.environ.get("PYTHONPATH", "")
    paths = pythonpath.split(os.pathsep)
    for path in paths:
        if path and path not in sys.path:
            sys.path.append(path)

ensure_pythonpath()

import click
import pandas as pd

from config import Config
from labutils.error_util import ConfigError, LabError
from labutils.harness_util import report_directory, run_scenario
from labutils.scenario_util import load_scenario

logger = logging.getLogger(__name__)


def _configure_logging():
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


def _load(config_path):
    try:
        return load_scenario(config_path)
    except ConfigError as err:
        click.echo(f"error: {err}", err=True)
        for key, value in err.details.items():
            click.echo(f"  {key}: {value}", err=True)
        sys.exit(2)


def _finish(run):
    for failure in run.failures:
        click.echo(f"FAILED {failure['experiment']}/{failure['name']}: "
                   f"value={failure['value']} bound={failure['bound']} {failure['detail']}", err=True)
    click.echo(f"{run.scenario.name}: {'passed' if run.passed else 'FAILED'} ({run.out_dir})")
    sys.exit(0 if run.passed else 1)


@click.group()
def cli():
    """Numerical laboratory for harmonic measure on rough planar boundaries."""
    _configure_logging()


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Artifact directory.")
@click.option("--experiment", "experiments", multiple=True, help="Run only these experiments.")
def run(config_path, out_dir, experiments):
    """Run every experiment of a scenario and write its artifacts."""
    scenario = _load(config_path)
    try:
        result = run_scenario(scenario, out_dir=out_dir, experiments=experiments or None)
    except LabError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(2)
    _finish(result)


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Artifact directory.")
def check(config_path, out_dir):
    """Run a scenario and record only its assertions."""
    scenario = _load(config_path)
    try:
        result = run_scenario(scenario, out_dir=out_dir, checks_only=True)
    except LabError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(2)
    _finish(result)


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Artifact directory.")
def oracle(config_path, out_dir):
    """Cross-validate the solver against walk-on-spheres for a scenario."""
    scenario = _load(config_path)
    try:
        result = run_scenario(scenario, out_dir=out_dir, experiments=["oracle"])
    except LabError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(2)
    _finish(result)


@cli.command()
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
def report(directory):
    """Summarise a run directory, or every run below an artifact root."""
    try:
        frame = report_directory(directory)
    except LabError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(2)
    with pd.option_context("display.max_rows", None, "display.max_colwidth", 60, "display.width", 200):
        click.echo(frame.to_string(index=False))
    if "passed" in frame.columns and not frame["passed"].fillna(False).astype(bool).all():
        sys.exit(1)


@cli.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=5000, type=int)
@click.option("--debug", is_flag=True)
def serve(host, port, debug):
    """Start the read-only report browser."""
    from app import create_app

    app = create_app()
    app.run(host=host, port=port, debug=debug)


def main():
    cli()

if __name__ == "__main__":
    main()
