#!/usr/bin/env python3

"""
The non-differentiable target matcher: detect, match, and count RANSAC inliers.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from matchkit.matcher.detect import (
    Feature,
    FeatureClass,
    FeatureSet,
    ImageTooSmallError,
    detect_features,
)
from matchkit.matcher.match import (
    Correspondence,
    correspondence_arrays,
    correspondences_from_arrays,
    match_features,
)
from matchkit.matcher.ransac import (
    SAMPLE_SIZE,
    NoModelError,
    TooFewCorrespondencesError,
    eight_point,
    ransac_fundamental,
    sampson_distance,
)
from matchkit.schema import MatcherConfig

logger = logging.getLogger(__name__)

__all__ = [
    "Correspondence",
    "Feature",
    "FeatureClass",
    "FeatureSet",
    "ImageTooSmallError",
    "MatchReport",
    "NoModelError",
    "TooFewCorrespondencesError",
    "correspondence_arrays",
    "correspondences_from_arrays",
    "count_inliers",
    "detect_features",
    "eight_point",
    "match_features",
    "ransac_fundamental",
    "sampson_distance",
]


@dataclass
class MatchReport:
    """
    Outcome of matching one image pair.

    `fundamental` is None when there are fewer than eight correspondences, and
    also when RANSAC finds no non-degenerate model among eight or more; both
    cases report zero inliers.
    """

    correspondences: List[Correspondence]
    fundamental: np.ndarray | None
    inlier_mask: np.ndarray
    seed: int
    features1: int = 0
    features2: int = 0
    inlier_count: int = field(init=False)

    def __post_init__(self):
        self.inlier_count = int(np.count_nonzero(self.inlier_mask))

    @property
    def match_count(self) -> int:
        return len(self.correspondences)

    def summary_line(self) -> str:
        return f"inliers={self.inlier_count} matches={self.match_count} seed={self.seed}"


def count_inliers(
    g1: np.ndarray, g2: np.ndarray, cfg: MatcherConfig | None = None, seed: int = 0
) -> MatchReport:
    cfg = cfg or MatcherConfig()
    f1 = detect_features(g1, cfg)
    f2 = detect_features(g2, cfg)
    corr = match_features(f1, f2, cfg)
    no_inliers = np.zeros(len(corr), dtype=bool)
    if len(corr) < SAMPLE_SIZE:
        return MatchReport(corr, None, no_inliers, seed, len(f1), len(f2))
    try:
        fundamental, mask = ransac_fundamental(corr, cfg.ransac_iters, cfg.tau_epi, seed)
    except NoModelError as e:
        logger.warning(f"No epipolar model for {len(corr)} correspondences: {e}")
        return MatchReport(corr, None, no_inliers, seed, len(f1), len(f2))
    return MatchReport(corr, fundamental, mask, seed, len(f1), len(f2))
