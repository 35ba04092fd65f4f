import math
import os

import numpy as np
import pytest

from matchkit.evaluation import (
    EmptyCountsError,
    EvalReport,
    KindModels,
    KindSummary,
    RouteTrace,
    ZeroVarianceError,
    build_route,
    dead_reckoning_max,
    evaluate,
    match_quartiles,
    match_stats,
    pearson,
)
from matchkit.nets import build_proxy
from matchkit.synth import route_pairs


def walk_route(distances, counts, threshold):
    localized = [0] + [i for i in range(1, len(counts)) if counts[i] >= threshold]
    gaps = [distances[b] - distances[a] for a, b in zip(localized, localized[1:]) if b > a + 1]
    if localized[-1] != len(counts) - 1:
        gaps.append(distances[-1] - distances[localized[-1]])
    return max(gaps, default=0.0)


def test_match_stats_examples():
    assert match_stats([5, 5, 5]) == (5.0, 0.0)
    assert match_stats([0, 10]) == (5.0, 5.0)
    with pytest.raises(EmptyCountsError):
        match_stats([])


def test_match_quartiles():
    assert match_quartiles([1, 2, 3, 4, 5]) == (2.0, 3.0, 4.0)


def test_pearson_examples():
    assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9819, abs=1e-4)


def test_pearson_errors():
    with pytest.raises(ZeroVarianceError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [1])


def test_stats_agree_with_direct_formulas():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        x = rng.normal(size=n)
        y = 0.5 * x + rng.normal(size=n)
        mu, sigma = match_stats(y)
        assert mu == pytest.approx(sum(y) / n)
        assert sigma == pytest.approx(math.sqrt(sum((v - mu) ** 2 for v in y) / n))
        dx, dy = x - x.mean(), y - y.mean()
        r = (dx * dy).sum() / math.sqrt((dx**2).sum() * (dy**2).sum())
        assert pearson(x, y) == pytest.approx(r, abs=1e-9)


def test_dead_reckoning_examples():
    distances = [0, 10, 20, 30, 40]
    assert dead_reckoning_max(RouteTrace(distances, [50, 5, 5, 50, 50]), 20) == 30.0
    assert dead_reckoning_max(RouteTrace(distances, [50] * 5), 20) == 0.0
    assert dead_reckoning_max(RouteTrace(distances, [0] * 5), 20) == 40.0
    # trailing failures run to the route end
    assert dead_reckoning_max(RouteTrace(distances, [50, 50, 50, 5, 5]), 20) == 20.0
    assert dead_reckoning_max(RouteTrace([3.0], [0]), 10) == 0.0


def test_dead_reckoning_matches_hand_walk():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 25))
        distances = np.cumsum(rng.uniform(0, 5, size=n))
        counts = rng.integers(0, 40, size=n)
        threshold = int(rng.integers(0, 45))
        trace = RouteTrace(distances, counts)
        assert dead_reckoning_max(trace, threshold) == walk_route(distances, counts, threshold)
        assert dead_reckoning_max(trace, 0) == 0.0


def test_dead_reckoning_monotone_in_threshold():
    rng = np.random.default_rng(2)
    for _ in range(200):
        trace = RouteTrace(np.arange(20, dtype=float), rng.integers(0, 50, size=20))
        values = [dead_reckoning_max(trace, t) for t in range(0, 60, 5)]
        assert values == sorted(values)


def test_route_trace_validation():
    with pytest.raises(ValueError):
        RouteTrace([0, 2, 1], [1, 1, 1])
    with pytest.raises(ValueError):
        RouteTrace([0, 1], [1, -1])
    with pytest.raises(ValueError):
        RouteTrace([0, 1], [1])


def test_build_route_follows_cross_condition_pairs(tiny_dataset):
    _, manifest = tiny_dataset
    indices = route_pairs(manifest)
    assert indices
    for i in indices:
        p = manifest.pairs[i]
        assert p.frame_offset == 0 and p.t1 != p.t2
    counts = {i: 3 * i for i in range(len(manifest))}
    trace = build_route(manifest, counts, spacing_m=2.5)
    assert trace.pair_indices == indices
    assert trace.distances.tolist() == [2.5 * k for k in range(len(indices))]
    assert trace.counts.tolist() == [3 * i for i in indices]


def test_report_csvs():
    report = EvalReport(thresholds=[10, 20])
    report.rows = [("gray", 0, 12, math.nan), ("gray", 1, 4, math.nan)]
    report.summaries = [
        KindSummary(
            kind="gray",
            mu=8.0,
            sigma=4.0,
            r=math.nan,
            dr_max={10: 1.0, 20: 2.0},
            quartiles=(6.0, 8.0, 10.0),
            min_count=4,
            max_count=12,
        )
    ]
    assert report.pairs_csv() == (
        "kind,pair_id,inliers_actual,inliers_predicted\ngray,0,12,nan\ngray,1,4,nan\n"
    )
    assert report.summary_csv() == (
        "kind,mu,sigma,r,dr_max_10,dr_max_20\ngray,8.000000,4.000000,nan,1.000000,2.000000\n"
    )
    assert report.boxplot_csv() == "kind,q1,median,q3,min,max\ngray,6.000000,8.000000,10.000000,4,12\n"
    with pytest.raises(KeyError):
        report.summary("mlp")


def test_evaluate_self_pairs(tiny_dataset, fast_run_config):
    _, manifest = tiny_dataset
    fast_run_config.train.resize_height = 96
    self_pairs = manifest.subset([p for p in manifest.pairs if p.is_self_pair])
    report = evaluate(self_pairs, [KindModels(kind="gray")], thresholds=[10], run_config=fast_run_config)
    summary = report.summary("gray")
    assert summary.min_count >= 10
    assert summary.dr_max[10] == 0.0
    assert math.isnan(summary.r)
    assert len(report.rows) == len(self_pairs)


def test_evaluate_is_deterministic(tiny_dataset, fast_run_config, tmp_path):
    _, manifest = tiny_dataset
    entries = [KindModels(kind="gray"), KindModels(kind="sumlog")]
    first = evaluate(manifest, entries, seed=3, run_config=fast_run_config)
    second = evaluate(manifest, entries, seed=3, run_config=fast_run_config)
    assert first.pairs_csv() == second.pairs_csv()
    assert first.summary_csv() == second.summary_csv()
    first.write(str(tmp_path))
    assert sorted(os.listdir(tmp_path)) == ["boxplot.csv", "pairs.csv", "summary.csv"]


def test_evaluate_with_proxy_and_examples(tiny_dataset, fast_run_config, tmp_path):
    _, manifest = tiny_dataset
    fast_run_config.eval.example_pairs = 2
    proxy = build_proxy(fast_run_config.nets, seed=0)
    entry = KindModels(kind="grey", proxy=proxy)
    assert entry.kind == "gray"
    report = evaluate(manifest, [entry], run_config=fast_run_config, examples_dir=str(tmp_path))
    assert all(not math.isnan(p) for _, _, _, p in report.rows)
    for index in range(2):
        for suffix in ("gray_1", "gray_2", "rgb_1", "rgb_2"):
            assert (tmp_path / f"pair{index:04d}_{suffix}.png").exists()
    assert not (tmp_path / "pair0002_gray_1.png").exists()


def test_evaluate_empty_manifest(fast_run_config):
    from matchkit.schema import DatasetManifest

    with pytest.raises(EmptyCountsError):
        evaluate(DatasetManifest(), [KindModels(kind="gray")], run_config=fast_run_config)


TRAINED_KINDS = ["sumlog-fit", "sumlog-e", "mlp", "mlp-e"]


@pytest.mark.slow
@pytest.mark.parametrize("kind", TRAINED_KINDS)
def test_trained_kind_beats_gray(experiment, kind):
    entry = experiment.trained_entry(kind)
    report = experiment.evaluate([KindModels("gray"), entry])
    assert report.summary(entry.kind).mu >= 1.5 * report.summary("gray").mu


@pytest.mark.slow
def test_best_transform_halves_dead_reckoning(experiment):
    entries = [KindModels("gray")] + [experiment.trained_entry(kind) for kind in TRAINED_KINDS]
    report = experiment.evaluate(entries)
    best = min(report.summary(e.kind).dr_max[20] for e in entries[1:])
    assert best <= 0.5 * report.summary("gray").dr_max[20]
