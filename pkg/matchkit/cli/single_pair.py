import logging
import os

import click

from matchkit import config
from matchkit.cli.shared import add_options, common_options, load_config, module_errors

logger = logging.getLogger(__name__)

image_options = [
    click.option("--img1", required=True, type=click.Path(dir_okay=False), help="First image of the pair."),
    click.option("--img2", required=True, type=click.Path(dir_okay=False), help="Second image of the pair."),
]


@click.command("transform")
@click.option(
    "--kind",
    required=True,
    type=click.Choice(config.TRANSFORM_KIND_NAMES, case_sensitive=False),
    help="Transform kind.",
)
@click.option(
    "--model",
    "model_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Transform bundle. gray needs none; sumlog without one uses the closed-form weights.",
)
@add_options(image_options)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@add_options(common_options)
def transform_cmd(kind, model_path, img1, img2, out_dir, config_path, seed):
    """Write the grayscale outputs of one transform applied to an image pair."""
    import torch

    from matchkit.bundle import bundle_colorspace_config, bundle_models, load_bundle
    from matchkit.evaluation import KindModels, transform_batch
    from matchkit.utils.img_utils import load_rgb, numpy_to_torch, save_png, torch_to_numpy

    run_config = load_config(config_path, seed)
    kind_config = config.get_transform_kind(kind)
    with module_errors():
        entry = KindModels(kind=kind)
        if model_path is not None:
            bundle = load_bundle(model_path)
            models, _ = bundle_models(bundle)
            if models is None or config.get_transform_kind(models.kind) is not kind_config:
                found = models.kind if models is not None else "no transform"
                msg = f"--model holds {found}, not {kind_config.primary_alias}"
                raise click.UsageError(msg)
            entry.models = models
            # the transform was trained with the bundle's epsilons and wavelengths
            run_config.colorspace = bundle_colorspace_config(bundle)
        elif kind_config.uses_encoder or kind_config.uses_mlp:
            msg = f"--kind {kind} needs --model"
            raise click.UsageError(msg)

        rgb1 = numpy_to_torch(load_rgb(img1))
        rgb2 = numpy_to_torch(load_rgb(img2))
        with torch.no_grad():
            g1, g2 = transform_batch(entry, rgb1, rgb2, run_config)
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for src, g in ((img1, g1), (img2, g2)):
            stem = os.path.splitext(os.path.basename(src))[0]
            path = os.path.join(out_dir, f"{stem}_{entry.kind}.png")
            if path in paths:
                path = os.path.join(out_dir, f"{stem}_{entry.kind}_2.png")
            save_png(torch_to_numpy(g[0]), path)
            paths.append(path)
    click.echo(" ".join(paths))


@click.command("match")
@add_options(image_options)
@add_options(common_options)
def match_cmd(img1, img2, config_path, seed):
    """Count RANSAC inlier matches between two grayscale (or RGB, converted by luma) images."""
    from matchkit.matcher import count_inliers
    from matchkit.utils.img_utils import load_gray

    run_config = load_config(config_path, seed)
    with module_errors():
        g1 = load_gray(img1)
        g2 = load_gray(img2)
        report = count_inliers(g1, g2, run_config.matcher, seed=run_config.train.seed)
    click.echo(report.summary_line())
