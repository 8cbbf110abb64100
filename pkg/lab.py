# lab.py
import logging
import sys

import click
from dotenv import load_dotenv
load_dotenv()
from ccanlab.commands import COMMANDS
from ccanlab.common import EXIT_OK, EXIT_USAGE, LabError
from ccanlab.config import LOG_LEVEL

logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO),
                    format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger("lab")


@click.group()
def cli():
    """Context-aware cross-attention lab for non-autoregressive translation."""


# Register commands
for command in COMMANDS:
    cli.add_command(command)


def main(argv=None) -> int:
    """Run one command; returns 0 on success, 1 on usage errors, 2 on data errors, 3 on numeric failures."""
    try:
        cli.main(args=argv, prog_name="lab", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except LabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(f"error: {e}", err=True)
        return e.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
