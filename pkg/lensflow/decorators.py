import logging
from functools import wraps

import click

from .errors import ConfigError, NonFiniteError, TrainingAborted

logger = logging.getLogger(__name__)

EXIT_PROPERTY_FAILURE = 1
EXIT_CONFIG = 2
EXIT_TRAINING_ABORTED = 3
EXIT_IO = 4


def exit_codes(fn):
    """
    Map domain failures of a CLI command to its exit status:
      property failure 1, config 2, training abort or non-finite metrics 3, I/O 4
    """
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            raise click.exceptions.Exit(EXIT_CONFIG)
        except (TrainingAborted, NonFiniteError) as exc:
            click.echo(f"training aborted: {exc}", err=True)
            raise click.exceptions.Exit(EXIT_TRAINING_ABORTED)
        except OSError as exc:
            logger.error("I/O failure: %s", exc)
            click.echo(f"I/O error: {exc}", err=True)
            raise click.exceptions.Exit(EXIT_IO)
    return wrapper


def require_all_passed(results) -> None:
    """Exit 1 when any property result failed."""
    failed = [r for r in results if not r.passed]
    if failed:
        click.echo(f"{len(failed)} of {len(results)} properties failed", err=True)
        raise click.exceptions.Exit(EXIT_PROPERTY_FAILURE)
