#!/usr/bin/env python3
import os
import click
import logging
from dotenv import load_dotenv

from plomctl import __version__
from plomctl.pipeline import basis, diagnose, fit, learn, oracle, sample, synth

# Load environment variables
load_dotenv()

# Configure logging
log_level = os.environ.get("PLOM_LOG_LEVEL", "INFO").upper()
logging.basicConfig(
    level=log_level if log_level in logging.getLevelNamesMapping() else logging.INFO,
    format="%(asctime)s - %(levelname)s - %(message)s",
)


@click.group()
@click.version_option(__version__, prog_name="plomctl")
@click.pass_context
def cli(ctx):
    """Probabilistic learning on manifolds: learn large datasets from small ones."""
    # Initialize context object (ctx.obj) if it doesn't exist
    ctx.ensure_object(dict)
    ctx.obj["log_level"] = logging.getLevelName(logging.getLogger().level)


# Add pipeline commands
cli.add_command(fit, name="fit")
cli.add_command(basis, name="basis")
cli.add_command(sample, name="sample")
cli.add_command(diagnose, name="diagnose")
cli.add_command(learn, name="learn")
cli.add_command(oracle, name="oracle")
cli.add_command(synth, name="synth")


def main():
    cli(obj={})


if __name__ == "__main__":
    main()
