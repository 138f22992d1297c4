from dataclasses import replace
from pathlib import Path

import click
from flask import Blueprint, current_app

from ..decorators import exit_codes
from ..experiments import (
    BUILTIN_NAMES,
    builtin_experiment,
    format_table,
    load_config,
    load_reports,
    run_dirs,
    run_seeds,
    sample_run,
)
from ..utils.manifest import verify_manifest

runs_bp = Blueprint("runs", __name__, cli_group=None)


def _resolve(experiment: str):
    """Built-in name, or a path to a JSON config."""
    if experiment in BUILTIN_NAMES:
        config = builtin_experiment(experiment)
        return replace(config, normalizer=replace(config.normalizer, n_mc=current_app.config["N_MC"]))
    if Path(experiment).suffix == ".json" or Path(experiment).exists():
        return load_config(experiment)
    return builtin_experiment(experiment)


@runs_bp.cli.command("train")
@click.argument("experiment")
@click.option("--seeds", default=1, show_default=True, type=click.IntRange(min=1), help="Derived seeds to run.")
@click.option("--seed", default=None, type=int, help="Master seed (overrides the config).")
@click.option("--out", "out_root", default=None, type=click.Path(file_okay=False), help="Output root.")
@exit_codes
def train(experiment, seeds, seed, out_root):
    """Train both tori for EXPERIMENT (exp1, exp2, boltz or a config file)."""
    config = _resolve(experiment)
    if seed is not None:
        config = config.with_seed(seed)
    out_root = out_root or current_app.config["OUTPUT_ROOT"]
    run_dir, reports = run_seeds(config, out_root, seeds, parallel=current_app.config["PARALLEL_TORI"])
    click.echo(format_table(reports))
    click.echo(f"run written to {run_dir}")


@runs_bp.cli.command("sample")
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--n", "n", required=True, type=click.IntRange(min=1), help="Number of samples.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--output", default=None, type=click.Path(dir_okay=False), help="CSV path.")
@exit_codes
def sample(run_dir, n, seed, output):
    """Draw N samples from the checkpoints of a finished run."""
    path = sample_run(run_dir, n, seed, output)
    click.echo(f"{n} samples written to {path}")


@runs_bp.cli.command("report")
@click.argument("run_dir", type=click.Path(file_okay=False))
@exit_codes
def report(run_dir):
    """Reprint the KL table of a run and check its file hashes."""
    directories = run_dirs(run_dir)
    if Path(run_dir) not in directories:
        directories.insert(0, Path(run_dir))
    for directory in directories:
        bad = verify_manifest(directory)
        if bad:
            raise OSError(f"{directory}: manifest mismatch for {', '.join(bad)}")
    click.echo(format_table(load_reports(run_dir)))
    click.echo("manifest ok")
