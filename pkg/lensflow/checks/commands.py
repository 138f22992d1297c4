import click
from flask import Blueprint

from ..decorators import exit_codes, require_all_passed
from ..properties import SUITES, run_suite

checks_bp = Blueprint("checks", __name__, cli_group=None)


@checks_bp.cli.command("verify")
@click.argument("suite", type=click.Choice(SUITES + ("all",)))
@click.option("--seed", default=0, show_default=True, type=int)
@exit_codes
def verify(suite, seed):
    """Run the numerical property suite SUITE and report pass/fail per property."""
    results = run_suite(suite, seed)
    for result in results:
        click.echo(str(result))
    require_all_passed(results)
    click.echo(f"all {len(results)} properties passed")
