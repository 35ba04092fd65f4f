import math

import numpy as np
import pytest
import torch

from matchkit.colorspace import apply_transform, gray
from matchkit.evaluation import KindModels
from matchkit.nets import build_proxy, build_transform_models
from matchkit.schema import DatasetManifest
from matchkit.tensor import AdamState
from matchkit.train import (
    CSV_HEADER,
    GRAY_HASH,
    EmptyManifestError,
    EpochRecord,
    ImageCache,
    KindMismatchError,
    LabelCache,
    TrainLog,
    batch_count,
    make_batches,
    pair_keys,
    pretrain_proxy,
    proxy_step,
    scaled_targets,
    train_transform,
    transform_hash,
    transformed_pair,
)


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_batches_are_deterministic_per_epoch(tiny_dataset):
    _, manifest = tiny_dataset
    cache = ImageCache(64)
    first = [b.keys for b in make_batches(manifest, 5, seed=1, epoch=0, cache=cache)]
    again = [b.keys for b in make_batches(manifest, 5, seed=1, epoch=0, cache=cache)]
    other = [b.keys for b in make_batches(manifest, 5, seed=1, epoch=1, cache=cache)]
    assert first == again
    assert first != other


def test_batches_partition_the_manifest(tiny_dataset):
    _, manifest = tiny_dataset
    batches = list(make_batches(manifest, 5, seed=0, epoch=3, cache=ImageCache(64)))
    keys = [k for b in batches for k in b.keys]
    assert sorted(keys) == pair_keys(manifest)
    assert len(batches) == batch_count(manifest, 5) == math.ceil(len(manifest) / 5)
    # last partial batch is kept
    assert len(batches[-1]) == len(manifest) - 5 * (len(batches) - 1)


def test_symmetric_keys_skip_self_pairs(tiny_dataset):
    _, manifest = tiny_dataset
    cross = sum(not p.is_self_pair for p in manifest.pairs)
    assert len(pair_keys(manifest, symmetric=True)) == len(manifest) + cross


def test_batches_resize_to_height(tiny_dataset):
    _, manifest = tiny_dataset
    batch = next(make_batches(manifest, 2, seed=0, epoch=0, cache=ImageCache(64)))
    n, c, h, w = batch.rgb1.shape
    assert (n, c, h) == (2, 3, 64)
    assert batch.rgb2.shape == batch.rgb1.shape
    # 96x128 source images
    assert abs(w - 128 * 64 / 96) <= 1


def test_empty_manifest_is_rejected(fast_run_config):
    with pytest.raises(EmptyManifestError):
        pretrain_proxy(DatasetManifest(), fast_run_config, show_progress=False)
    with pytest.raises(EmptyManifestError):
        train_transform(DatasetManifest(), build_proxy(fast_run_config.nets), fast_run_config, kind="mlp")


def test_untrainable_kind_is_rejected(tiny_dataset, fast_run_config):
    _, manifest = tiny_dataset
    with pytest.raises(KindMismatchError):
        train_transform(manifest, build_proxy(fast_run_config.nets), fast_run_config, kind="gray")


def test_models_must_match_kind(tiny_dataset, fast_run_config):
    _, manifest = tiny_dataset
    models = build_transform_models("mlp", fast_run_config.nets)
    with pytest.raises(KindMismatchError):
        train_transform(
            manifest, build_proxy(fast_run_config.nets), fast_run_config, kind="sumlog-e", models=models
        )


def test_transform_hash_rounding(small_nets):
    assert transform_hash(None) == GRAY_HASH
    models = build_transform_models("sumlog-fit", small_nets)
    base = transform_hash(models)
    with torch.no_grad():
        models.theta += 1e-6
    assert transform_hash(models) == base
    with torch.no_grad():
        models.theta += 1e-2
    assert transform_hash(models) != base


def test_label_cache_reuses_counts(tiny_dataset, fast_run_config):
    _, manifest = tiny_dataset
    batch = next(make_batches(manifest, 3, seed=0, epoch=0, cache=ImageCache(64)))
    g1, g2 = transformed_pair(fast_run_config, "gray", batch, None)
    labels = LabelCache(fast_run_config, seed=0)
    first = labels.counts(g1, g2, batch.keys, GRAY_HASH)
    second = labels.counts(g1, g2, batch.keys, GRAY_HASH)
    assert first == second
    assert all(c >= 0 for c in first)
    assert (labels.misses, labels.hits) == (3, 3)
    labels.counts(g1, g2, batch.keys, "other")
    assert labels.misses == 6


def test_proxy_step_leaves_transform_untouched(small_nets):
    models = build_transform_models("sumlog-e", small_nets, seed=0)
    proxy = build_proxy(small_nets, seed=0)
    before = _params(models.encoder)
    rgb1, rgb2 = torch.rand(2, 3, 48, 64), torch.rand(2, 3, 48, 64)
    with torch.no_grad():
        g1, g2 = apply_transform("sumlog-e", rgb1, rgb2, models=models)
    proxy_step(proxy, AdamState(proxy.parameters()), g1, g2, torch.tensor([0.1, 0.2]))
    assert _same(before, models.encoder.parameters())


def test_transform_step_never_moves_proxy(tiny_dataset, fast_run_config):
    _, manifest = tiny_dataset
    fast_run_config.train.proxy_steps_per_transform_step = 0
    proxy = build_proxy(fast_run_config.nets, seed=0)
    before = _params(proxy)
    models, proxy, log = train_transform(manifest, proxy, fast_run_config, kind="sumlog-fit", show_progress=False)
    assert _same(before, proxy.parameters())
    assert not torch.allclose(models.theta.detach(), torch.full((3,), 1 / 3))
    assert len(log.records) == 1
    assert math.isnan(log.records[0].proxy_loss)
    assert math.isfinite(log.records[0].transform_loss)


def test_train_transform_refreshes_proxy(tiny_dataset, fast_run_config):
    _, manifest = tiny_dataset
    proxy = build_proxy(fast_run_config.nets, seed=0)
    before = _params(proxy)
    models, proxy, log = train_transform(manifest, proxy, fast_run_config, kind="mlp-e", show_progress=False)
    assert not _same(before, proxy.parameters())
    assert not proxy.training
    assert math.isfinite(log.records[0].proxy_loss)
    assert math.isfinite(log.records[0].val_inliers)


def test_pretrain_is_deterministic(tiny_dataset, fast_run_config):
    _, manifest = tiny_dataset
    p1, log1 = pretrain_proxy(manifest, fast_run_config, show_progress=False)
    p2, log2 = pretrain_proxy(manifest, fast_run_config, show_progress=False)
    assert _same(_params(p1), p2.parameters())
    assert log1.to_csv_text() == log2.to_csv_text()
    assert len(log1.step_losses) == batch_count(manifest, fast_run_config.train.batch_size)
    # scaled targets keep the loss in a sane range
    assert all(0 <= loss <= 100 for loss in log1.step_losses)


def test_validation_can_be_disabled(tiny_dataset, fast_run_config):
    _, manifest = tiny_dataset
    fast_run_config.train.validation_pairs = 0
    _, log = pretrain_proxy(manifest, fast_run_config, show_progress=False)
    assert math.isnan(log.records[0].val_inliers)


def test_train_log_csv(tmp_path):
    log = TrainLog(stage="proxy")
    log.append(EpochRecord(epoch=0, proxy_loss=0.5, val_inliers=12.0, val_predicted=10.25, seconds=3.0))
    log.append(EpochRecord(epoch=1, proxy_loss=0.25, transform_loss=-0.125))
    expected = (
        f"{CSV_HEADER}\n"
        "0,0.500000,nan,12.000000,10.250000\n"
        "1,0.250000,-0.125000,nan,nan\n"
    )
    assert log.to_csv_text() == expected
    assert log.wall_clock == 3.0
    path = tmp_path / "log.csv"
    log.write_csv(str(path))
    assert path.read_text(encoding="utf-8") == expected


def test_scaled_targets():
    assert torch.allclose(scaled_targets([0, 50, 200], 0.01), torch.tensor([0.0, 0.5, 2.0]))


@pytest.mark.slow
def test_proxy_overfits_single_pair(tiny_dataset, fast_run_config):
    _, manifest = tiny_dataset
    single = manifest.subset([p for p in manifest.pairs if not p.is_self_pair][:1])
    fast_run_config.train.batch_size = 1
    fast_run_config.train.epochs = 500
    fast_run_config.train.learning_rate = 1e-3
    fast_run_config.train.validation_pairs = 0
    _, log = pretrain_proxy(single, fast_run_config, show_progress=False)
    assert len(log.step_losses) == 500
    assert np.mean(log.step_losses[-10:]) < 1e-3


def test_theta_has_its_own_learning_rate(tiny_dataset, fast_run_config):
    _, manifest = tiny_dataset
    cfg = fast_run_config.train
    cfg.batch_size = len(manifest)
    cfg.proxy_steps_per_transform_step = 0
    cfg.validation_pairs = 0
    cfg.theta_learning_rate = 0.02
    proxy = build_proxy(fast_run_config.nets, seed=0)
    models, _, _ = train_transform(manifest, proxy, fast_run_config, kind="sumlog", show_progress=False)
    # a single Adam step moves each weight by at most its learning rate
    moved = float((models.theta.detach() - 1 / 3).abs().max())
    assert 0.5 * cfg.theta_learning_rate <= moved <= 1.001 * cfg.theta_learning_rate
    assert moved > 10 * cfg.learning_rate


def test_first_epoch_loss_is_target_scaled(tiny_dataset, fast_run_config):
    _, manifest = tiny_dataset
    cfg = fast_run_config.train
    _, log = pretrain_proxy(manifest, fast_run_config, show_progress=False)
    labels = LabelCache(fast_run_config, cfg.seed)
    counts = []
    for batch in make_batches(manifest, cfg.batch_size, cfg.seed, 0, ImageCache(cfg.resize_height)):
        counts.extend(labels.counts(gray(batch.rgb1), gray(batch.rgb2), batch.keys, GRAY_HASH))
    targets = scaled_targets(counts, cfg.target_scale).numpy()
    loss = log.records[0].proxy_loss
    assert 0.1 * targets.var() <= loss <= 10 * np.mean(targets**2)


@pytest.mark.slow
def test_proxy_tracks_held_out_counts(experiment):
    entry = KindModels("gray", proxy=experiment.proxy, target_scale=experiment.run_config.train.target_scale)
    report = experiment.evaluate([entry])
    assert report.summary("gray").r >= 0.9


@pytest.mark.slow
def test_fitted_sumlog_keeps_up_with_closed_form(experiment):
    report = experiment.evaluate([KindModels("sumlog")])
    closed_form = report.summary("sumlog").mu
    fitted = experiment.evaluate([experiment.trained_entry("sumlog-fit")]).summary("sumlog").mu
    assert fitted >= 0.9 * closed_form


@pytest.mark.slow
def test_training_raises_predicted_counts(experiment):
    scale = experiment.run_config.train.target_scale
    before = KindModels("gray", proxy=experiment.proxy, target_scale=scale)
    report = experiment.evaluate([before, experiment.trained_entry("sumlog")])

    def mean_predicted(kind):
        return np.mean([p for k, _, _, p in report.rows if k == kind])

    assert mean_predicted("sumlog") > mean_predicted("gray")
