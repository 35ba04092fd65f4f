import logging

import click
from click_help_colors import HelpColorsGroup

from matchkit.cli.evaluate import eval_cmd
from matchkit.cli.gen_data import gen_data_cmd
from matchkit.cli.single_pair import match_cmd, transform_cmd
from matchkit.cli.train import train_cmd
from matchkit.version import get_version

logger = logging.getLogger(__name__)

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


@click.group(
    cls=HelpColorsGroup,
    help_headers_color="yellow",
    help_options_color="green",
)
@click.version_option(version=get_version() or "unknown", message="%(version)s")
@click.option(
    "--log-level",
    default="INFO",
    type=click.Choice(LOG_LEVELS, case_sensitive=False),
    show_default=True,
    help="Logging level for messages written to stderr.",
)
@click.pass_context
def matchkit_cmd(ctx, log_level):
    """
    Learn RGB-to-grayscale transforms that maximize inlier feature matches.

    Typical flow: gen-data, train --stage proxy, train --stage transform, eval.
    MATCHKIT_THREADS caps worker threads; set it to 1 for byte-identical reruns.
    """
    from matchkit.utils import configure_threads
    from matchkit.utils.log_utils import configure_logging

    configure_logging(log_level.upper())
    try:
        configure_threads()
    except ValueError as e:
        raise click.UsageError(str(e)) from e
    ctx.ensure_object(dict)


@click.command("system-info")
def system_info_cmd():
    """Print versions, platform and thread settings."""
    from matchkit.utils.debug_info import get_debug_info

    for k, v in get_debug_info().items():
        click.echo(f"{k}: {v}")


matchkit_cmd.add_command(gen_data_cmd, name="gen-data")
matchkit_cmd.add_command(train_cmd, name="train")
matchkit_cmd.add_command(eval_cmd, name="eval")
matchkit_cmd.add_command(transform_cmd, name="transform")
matchkit_cmd.add_command(match_cmd, name="match")
matchkit_cmd.add_command(system_info_cmd, name="system-info")


if __name__ == "__main__":
    matchkit_cmd()  # noqa
