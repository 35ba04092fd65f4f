import logging
import os

import click

from matchkit import config
from matchkit.cli.shared import (
    add_options,
    common_options,
    load_config,
    module_errors,
    read_split,
)

logger = logging.getLogger(__name__)


def log_csv_path(bundle_path: str) -> str:
    return os.path.splitext(bundle_path)[0] + "_log.csv"


@click.command("train")
@click.option(
    "--stage",
    required=True,
    type=click.Choice(["proxy", "transform"], case_sensitive=False),
    help="proxy: pre-train the match-count proxy on grayscale pairs. transform: train a transform against it.",
)
@click.option(
    "--kind",
    type=click.Choice(config.TRANSFORM_KIND_NAMES, case_sensitive=False),
    default=None,
    help="Transform kind for the transform stage. Defaults to train.kind from the config.",
)
@click.option(
    "--data",
    "data_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False),
    help="Dataset directory holding train.txt (and optionally test.txt for validation).",
)
@click.option(
    "--model",
    "model_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Pre-trained proxy bundle. Required for the transform stage.",
)
@click.option(
    "--out",
    "out_path",
    required=True,
    type=click.Path(dir_okay=False),
    help="Where to write the model bundle. The training log goes next to it as <name>_log.csv.",
)
@click.option("--progress/--no-progress", default=True, help="Show progress bars.")
@add_options(common_options)
def train_cmd(stage, kind, data_dir, model_path, out_path, progress, config_path, seed):
    """Train the proxy or a transform and save an MKT1 model bundle."""
    from matchkit.bundle import bundle_models, load_bundle, make_bundle, save_bundle
    from matchkit.train import pretrain_proxy, train_transform

    stage = stage.lower()
    run_config = load_config(config_path, seed)
    if stage == "proxy":
        if kind is not None and config.get_transform_kind(kind).trainable:
            msg = f"--stage proxy trains on grayscale pairs; --kind {kind} belongs to --stage transform"
            raise click.UsageError(msg)
        kind = config.DEFAULT_TRANSFORM_KIND
    else:
        kind = config.get_transform_kind(kind or run_config.train.kind).primary_alias
        if not config.get_transform_kind(kind).trainable:
            valid = ", ".join(config.TRAINABLE_KIND_NAMES)
            msg = f"--stage transform needs a trainable --kind ({valid}), got {kind}"
            raise click.UsageError(msg)
        if model_path is None:
            msg = "--stage transform requires --model (the pre-trained proxy bundle)"
            raise click.UsageError(msg)

    with module_errors():
        manifest = read_split(data_dir, "train")
        test_path = os.path.join(data_dir, "test.txt")
        validation = read_split(data_dir, "test") if os.path.exists(test_path) else None
        metadata = {
            "seed": run_config.train.seed,
            "epochs": run_config.train.epochs,
            "dataset_hash": manifest.content_hash(),
        }

        if stage == "proxy":
            proxy, log = pretrain_proxy(manifest, run_config, validation, show_progress=progress)
            bundle = make_bundle(run_config, proxy=proxy, metadata=metadata)
        else:
            _, proxy = bundle_models(load_bundle(model_path))
            if proxy is None:
                msg = f"{model_path} holds no proxy parameters"
                raise click.UsageError(msg)
            models, proxy, log = train_transform(
                manifest, proxy, run_config, kind=kind, validation=validation, show_progress=progress
            )
            bundle = make_bundle(run_config, proxy=proxy, models=models, metadata=metadata)

        out_dir = os.path.dirname(os.path.abspath(out_path))
        os.makedirs(out_dir, exist_ok=True)
        save_bundle(bundle, out_path)
        log.write_csv(log_csv_path(out_path))
    logger.info(f"Training took {log.wall_clock:.1f}s")
    click.echo(f"stage={stage} kind={kind} epochs={len(log.records)} bundle={out_path}")
