import logging

import click

from matchkit.cli.shared import add_options, common_options, load_config, module_errors

logger = logging.getLogger(__name__)


@click.command("gen-data")
@click.option(
    "--out",
    "out_dir",
    required=True,
    type=click.Path(file_okay=False),
    help="Directory to write images/, manifest.txt, train.txt and test.txt into.",
)
@add_options(common_options)
def gen_data_cmd(out_dir, config_path, seed):
    """
    Render a synthetic cross-illumination dataset.

    Scenes are lit by black-body illuminants at each of synth.temperatures and
    captured from synth.frames_per_scene nearby viewpoints.
    """
    from matchkit.synth import generate_dataset
    from matchkit.utils import timed

    run_config = load_config(config_path, seed)
    with module_errors():
        with timed("Dataset generation"):
            manifest = generate_dataset(run_config.synth, out_dir, seed=run_config.train.seed)
    click.echo(f"pairs={len(manifest)} scenes={len(manifest.scene_ids())} out={out_dir}")
