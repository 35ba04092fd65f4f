import logging
import os
from contextlib import contextmanager
from typing import List

import click

from matchkit.schema import ConfigError, DatasetManifest, RunConfig, load_run_config

logger = logging.getLogger(__name__)


def add_options(options):
    def _add_options(func):
        for option in reversed(options):
            func = option(func)
        return func

    return _add_options


common_options = [
    click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="Run config file of `section.key = value` lines. Unset keys keep their defaults.",
    ),
    click.option(
        "--seed",
        type=int,
        default=None,
        help="Seed for every random choice the command makes. Defaults to train.seed from the config.",
    ),
]


@contextmanager
def module_errors():
    """Report module and I/O failures as a one-line error with exit code 1."""
    try:
        yield
    except click.ClickException:
        raise
    except (ValueError, RuntimeError, OSError, KeyError) as e:
        logger.debug("command failed", exc_info=True)
        raise click.ClickException(f"{type(e).__name__}: {e}") from e


def load_config(config_path: str | None, seed: int | None = None) -> RunConfig:
    try:
        run_config = load_run_config(config_path)
    except ConfigError as e:
        raise click.ClickException(str(e)) from e
    if seed is not None:
        if seed < 0:
            msg = f"--seed must be non-negative, got {seed}"
            raise click.UsageError(msg)
        run_config.train.seed = seed
    return run_config


def parse_int_list(value: str, option: str) -> List[int]:
    try:
        items = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        msg = f"{option} expects comma-separated integers, got {value!r}"
        raise click.UsageError(msg) from None
    if not items:
        msg = f"{option} must not be empty"
        raise click.UsageError(msg)
    return items


def read_split(data_dir: str, split: str) -> DatasetManifest:
    """Read `<split>.txt` from a dataset directory, falling back to `manifest.txt`."""
    path = os.path.join(data_dir, f"{split}.txt")
    if not os.path.exists(path):
        path = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(path):
        msg = f"no {split}.txt or manifest.txt in {data_dir}"
        raise click.ClickException(msg)
    manifest = DatasetManifest.read(path)
    logger.info(f"Read {len(manifest)} pairs from {path}")
    return manifest
