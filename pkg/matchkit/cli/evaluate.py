import logging
import os
from typing import Dict, List

import click

from matchkit import config
from matchkit.cli.shared import (
    add_options,
    common_options,
    load_config,
    module_errors,
    parse_int_list,
    read_split,
)

logger = logging.getLogger(__name__)


def parse_kinds(value: str) -> List[str]:
    kinds = []
    for name in (v.strip() for v in value.split(",")):
        if not name:
            continue
        try:
            kind = config.get_transform_kind(name).primary_alias
        except config.UnknownTransformKindError as e:
            raise click.UsageError(str(e)) from None
        if kind not in kinds:
            kinds.append(kind)
    if not kinds:
        msg = "--kinds must name at least one transform kind"
        raise click.UsageError(msg)
    return kinds


def resolve_entries(kinds: List[str], model_paths: List[str]):
    """Pair each requested kind with the networks from the bundles given on the command line."""
    from matchkit.bundle import bundle_models, load_bundle
    from matchkit.evaluation import KindModels

    transform_bundles: Dict[str, tuple] = {}
    proxy_only = None
    for path in model_paths:
        bundle = load_bundle(path)
        models, proxy = bundle_models(bundle)
        scale = float(bundle.values.get("meta.target_scale", config.DEFAULT_TARGET_SCALE))
        if models is None:
            proxy_only = (proxy, scale)
        else:
            transform_bundles[models.kind] = (models, proxy, scale)

    entries = []
    for kind in kinds:
        if kind in transform_bundles:
            models, proxy, scale = transform_bundles[kind]
            entries.append(KindModels(kind=kind, models=models, proxy=proxy, target_scale=scale))
        elif kind in ("gray", "sumlog"):
            # gray needs no model; sumlog without a bundle uses the closed-form weights
            proxy, scale = proxy_only or (None, config.DEFAULT_TARGET_SCALE)
            entries.append(KindModels(kind=kind, proxy=proxy, target_scale=scale))
        else:
            msg = f"no --models bundle provides kind '{kind}'"
            raise click.UsageError(msg)
    return entries


@click.command("eval")
@click.option(
    "--data",
    "data_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False),
    help="Dataset directory; test.txt is evaluated (manifest.txt if there is no split).",
)
@click.option(
    "--models",
    "model_paths",
    multiple=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Model bundles; repeat for several. A proxy-only bundle supplies predictions for gray.",
)
@click.option("--kinds", default="gray", show_default=True, help="Comma-separated transform kinds.")
@click.option("--thresholds", default=None, help="Comma-separated inlier thresholds. Defaults to eval.thresholds.")
@click.option(
    "--out",
    "out_dir",
    required=True,
    type=click.Path(file_okay=False),
    help="Directory for pairs.csv, summary.csv, boxplot.csv and examples/.",
)
@add_options(common_options)
def eval_cmd(data_dir, model_paths, kinds, thresholds, out_dir, config_path, seed):
    """Count inliers per transform and report statistics, correlation and dead-reckoning distances."""
    from matchkit.evaluation import evaluate

    kind_list = parse_kinds(kinds)
    run_config = load_config(config_path, seed)
    threshold_list = (
        parse_int_list(thresholds, "--thresholds") if thresholds else list(run_config.eval.thresholds)
    )
    with module_errors():
        manifest = read_split(data_dir, "test")
        entries = resolve_entries(kind_list, list(model_paths))
        report = evaluate(
            manifest,
            entries,
            thresholds=threshold_list,
            seed=run_config.train.seed,
            run_config=run_config,
            examples_dir=os.path.join(out_dir, "examples"),
        )
        report.write(out_dir)
    for s in report.summaries:
        click.echo(f"kind={s.kind} mu={s.mu:.1f} sigma={s.sigma:.1f} r={s.r:.3f}")
