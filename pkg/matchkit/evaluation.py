#!/usr/bin/env python3

"""
Evaluation metrics: inlier-count statistics per transform, predicted-vs-actual
correlation, and the longest stretch of route travelled on dead reckoning.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np
import torch
from torch import Tensor

from matchkit import config
from matchkit.colorspace import apply_transform, constrained_params
from matchkit.matcher import count_inliers
from matchkit.nets import ProxyModel, TransformModels, freeze, proxy_forward
from matchkit.schema import DatasetManifest, RunConfig
from matchkit.synth import route_pairs
from matchkit.train import ImageCache, load_batch
from matchkit.utils import chunked, derive_seed, parallel_map
from matchkit.utils.img_utils import save_png, torch_to_numpy

logger = logging.getLogger(__name__)

PAIRS_CSV = "pairs.csv"
SUMMARY_CSV = "summary.csv"
BOXPLOT_CSV = "boxplot.csv"


class EmptyCountsError(ValueError):
    pass


class ZeroVarianceError(ValueError):
    pass


@dataclass
class RouteTrace:
    distances: np.ndarray
    counts: np.ndarray
    pair_indices: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.distances.shape != self.counts.shape or self.distances.ndim != 1:
            msg = f"route distances {self.distances.shape} and counts {self.counts.shape} must be equal-length vectors"
            raise ValueError(msg)
        if np.any(np.diff(self.distances) < 0):
            msg = "route distances must be non-decreasing"
            raise ValueError(msg)
        if np.any(self.counts < 0):
            msg = "route inlier counts must be non-negative"
            raise ValueError(msg)

    def __len__(self):
        return len(self.counts)


def build_route(
    manifest: DatasetManifest, counts: Mapping[int, int], spacing_m: float = 1.0
) -> RouteTrace:
    indices = route_pairs(manifest)
    return RouteTrace(
        distances=spacing_m * np.arange(len(indices), dtype=np.float64),
        counts=np.array([counts[i] for i in indices], dtype=np.int64),
        pair_indices=indices,
    )


def match_stats(counts: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    if len(counts) == 0:
        msg = "match_stats needs at least one count"
        raise EmptyCountsError(msg)
    arr = np.asarray(counts, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def match_quartiles(counts: Sequence[float]) -> tuple[float, float, float]:
    if len(counts) == 0:
        msg = "match_quartiles needs at least one count"
        raise EmptyCountsError(msg)
    q1, median, q3 = np.percentile(np.asarray(counts, dtype=np.float64), [25, 50, 75])
    return float(q1), float(median), float(q3)


def pearson(pred: Sequence[float], actual: Sequence[float]) -> float:
    from scipy.stats import pearsonr

    if len(pred) != len(actual):
        msg = f"pearson inputs differ in length: {len(pred)} vs {len(actual)}"
        raise ValueError(msg)
    if len(pred) < 2:
        msg = "pearson needs at least two samples"
        raise ValueError(msg)
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(actual, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        msg = "pearson is undefined for a constant input"
        raise ZeroVarianceError(msg)
    r, _ = pearsonr(x, y)
    return float(np.clip(r, -1.0, 1.0))


def dead_reckoning_max(trace: RouteTrace, threshold: int) -> float:
    """
    Longest distance between consecutive localized vertices around a failure run.

    A vertex is localized when its count reaches the threshold. The route
    start always counts as localized and a trailing failure run extends to the
    route end. Zero when nothing fails.
    """
    if len(trace) == 0:
        msg = "dead_reckoning_max needs at least one route vertex"
        raise ValueError(msg)
    anchor = trace.distances[0]
    failing = False
    best = 0.0
    for i in range(len(trace)):
        if i > 0 and trace.counts[i] < threshold:
            failing = True
            continue
        if failing:
            best = max(best, trace.distances[i] - anchor)
            failing = False
        anchor = trace.distances[i]
    if failing:
        best = max(best, trace.distances[-1] - anchor)
    return float(best)


@dataclass
class KindModels:
    """What evaluation needs to run one transform kind."""

    kind: str
    models: TransformModels | None = None
    proxy: ProxyModel | None = None
    fixed_theta: Tensor | None = None
    target_scale: float = config.DEFAULT_TARGET_SCALE

    def __post_init__(self):
        self.kind = config.get_transform_kind(self.kind).primary_alias


@dataclass
class KindSummary:
    kind: str
    mu: float
    sigma: float
    r: float
    dr_max: Dict[int, float]
    quartiles: tuple[float, float, float]
    min_count: int
    max_count: int


@dataclass
class EvalReport:
    thresholds: List[int]
    summaries: List[KindSummary] = field(default_factory=list)
    rows: List[tuple[str, int, int, float]] = field(default_factory=list)

    def summary(self, kind: str) -> KindSummary:
        for s in self.summaries:
            if s.kind == kind:
                return s
        msg = f"no results for kind '{kind}'"
        raise KeyError(msg)

    def pairs_csv(self) -> str:
        lines = ["kind,pair_id,inliers_actual,inliers_predicted"]
        lines += [f"{k},{i},{a},{_fmt(p)}" for k, i, a, p in self.rows]
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        header = ["kind", "mu", "sigma", "r"] + [f"dr_max_{t}" for t in self.thresholds]
        lines = [",".join(header)]
        for s in self.summaries:
            values = [s.mu, s.sigma, s.r] + [s.dr_max[t] for t in self.thresholds]
            lines.append(",".join([s.kind] + [_fmt(v) for v in values]))
        return "\n".join(lines) + "\n"

    def boxplot_csv(self) -> str:
        lines = ["kind,q1,median,q3,min,max"]
        for s in self.summaries:
            q1, median, q3 = s.quartiles
            lines.append(f"{s.kind},{_fmt(q1)},{_fmt(median)},{_fmt(q3)},{s.min_count},{s.max_count}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for name, text in (
            (PAIRS_CSV, self.pairs_csv()),
            (SUMMARY_CSV, self.summary_csv()),
            (BOXPLOT_CSV, self.boxplot_csv()),
        ):
            with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as f:
                f.write(text)


def _fmt(value: float) -> str:
    return "nan" if math.isnan(value) else f"{value:.6f}"


def transform_batch(
    entry: KindModels, rgb1: Tensor, rgb2: Tensor, run_config: RunConfig
) -> tuple[Tensor, Tensor]:
    fixed_theta = entry.fixed_theta
    if entry.kind == "sumlog" and entry.models is None and fixed_theta is None:
        fixed_theta = constrained_params(run_config.colorspace.wavelengths)
    return apply_transform(
        entry.kind,
        rgb1,
        rgb2,
        models=entry.models,
        fixed_theta=fixed_theta,
        eps_log=run_config.colorspace.eps_log,
        eps_sigma=run_config.colorspace.eps_sigma,
    )


def evaluate_kind(
    manifest: DatasetManifest,
    entry: KindModels,
    run_config: RunConfig,
    seed: int,
    cache: ImageCache,
    examples_dir: str | None = None,
) -> tuple[List[int], List[float]]:
    actual: List[int] = []
    predicted: List[float] = []
    n_examples = run_config.eval.example_pairs if examples_dir else 0
    modules = entry.models.modules() if entry.models is not None else []
    if entry.proxy is not None:
        modules = [entry.proxy, *modules]
    with freeze(*modules), torch.no_grad():
        for chunk in chunked(list(range(len(manifest))), run_config.train.batch_size):
            batch = load_batch(manifest, [(i, False) for i in chunk], cache)
            g1, g2 = transform_batch(entry, batch.rgb1, batch.rgb2, run_config)
            imgs1 = [torch_to_numpy(g) for g in g1]
            imgs2 = [torch_to_numpy(g) for g in g2]

            def job(j: int) -> int:
                report = count_inliers(imgs1[j], imgs2[j], run_config.matcher, seed=derive_seed(seed, chunk[j]))
                return report.inlier_count

            actual.extend(parallel_map(job, range(len(chunk))))
            if entry.proxy is not None:
                predicted.extend((proxy_forward(entry.proxy, g1, g2) / entry.target_scale).tolist())
            else:
                predicted.extend([math.nan] * len(chunk))

            for j, index in enumerate(chunk):
                if index >= n_examples:
                    break
                assert examples_dir is not None
                stem = os.path.join(examples_dir, f"pair{index:04d}")
                save_png(imgs1[j], f"{stem}_{entry.kind}_1.png")
                save_png(imgs2[j], f"{stem}_{entry.kind}_2.png")
                save_png(torch_to_numpy(batch.rgb1[j]), f"{stem}_rgb_1.png")
                save_png(torch_to_numpy(batch.rgb2[j]), f"{stem}_rgb_2.png")
    return actual, predicted


def evaluate(
    manifest: DatasetManifest,
    entries: Sequence[KindModels],
    thresholds: Sequence[int] = (10, 20, 30),
    seed: int = 0,
    run_config: RunConfig | None = None,
    examples_dir: str | None = None,
) -> EvalReport:
    """Match every pair under every transform kind and aggregate the metrics."""
    run_config = run_config or RunConfig()
    if len(manifest) == 0:
        msg = "evaluation manifest has no pairs"
        raise EmptyCountsError(msg)
    cache = ImageCache(run_config.train.resize_height)
    report = EvalReport(thresholds=list(thresholds))
    for entry in entries:
        actual, predicted = evaluate_kind(manifest, entry, run_config, seed, cache, examples_dir)
        report.rows.extend(
            (entry.kind, i, a, p) for i, (a, p) in enumerate(zip(actual, predicted))
        )
        mu, sigma = match_stats(actual)
        r = math.nan
        if entry.proxy is not None and len(actual) >= 2:
            try:
                r = pearson(predicted, actual)
            except ZeroVarianceError as e:
                logger.warning(f"{entry.kind}: correlation undefined ({e})")
        route = build_route(manifest, dict(enumerate(actual)), run_config.eval.route_spacing_m)
        dr_max = {t: dead_reckoning_max(route, t) if len(route) else 0.0 for t in thresholds}
        report.summaries.append(
            KindSummary(
                kind=entry.kind,
                mu=mu,
                sigma=sigma,
                r=r,
                dr_max=dr_max,
                quartiles=match_quartiles(actual),
                min_count=int(min(actual)),
                max_count=int(max(actual)),
            )
        )
        logger.info(
            f"{entry.kind}: inliers {mu:.0f} ({sigma:.0f}), r={r:.3f}, "
            + ", ".join(f"dr_max@{t}={v:.1f}m" for t, v in dr_max.items())
        )
    return report
