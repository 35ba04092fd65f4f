#!/usr/bin/env python3

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from matchkit.matcher.detect import FeatureSet
from matchkit.schema import MatcherConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Correspondence:
    p1: tuple[float, float]
    p2: tuple[float, float]
    distance: float
    index1: int = -1
    index2: int = -1


def _best_indices(cost: np.ndarray, spatial: np.ndarray, axis: int) -> np.ndarray:
    """Argmin of descriptor cost along axis, ties broken by smaller displacement, then index."""
    best_cost = cost.min(axis=axis, keepdims=True)
    tied = (cost == best_cost) & np.isfinite(cost)
    return np.argmin(np.where(tied, spatial, np.inf), axis=axis)


def _match_class(f1: FeatureSet, f2: FeatureSet, idx1: np.ndarray, idx2: np.ndarray, radius: float):
    from scipy.spatial.distance import cdist

    p1, p2 = f1.positions[idx1], f2.positions[idx2]
    spatial = cdist(p1, p2)
    cost = cdist(f1.descriptors[idx1], f2.descriptors[idx2], metric="cityblock")
    cost[spatial > radius] = np.inf

    forward = _best_indices(cost, spatial, axis=1)
    backward = _best_indices(cost, spatial, axis=0)
    rows = np.arange(len(idx1))
    valid = np.isfinite(cost[rows, forward])
    mutual = valid & (backward[forward] == rows)
    rows = rows[mutual]
    cols = forward[mutual]
    return idx1[rows], idx2[cols], cost[rows, cols]


def match_features(
    f1: FeatureSet, f2: FeatureSet, cfg: MatcherConfig | None = None
) -> List[Correspondence]:
    """Nearest-descriptor (SAD) matches within the search radius, same class only, mutually consistent."""
    cfg = cfg or MatcherConfig()
    out: List[Correspondence] = []
    if len(f1) == 0 or len(f2) == 0:
        return out

    for feature_class in np.unique(f1.classes):
        idx1 = np.flatnonzero(f1.classes == feature_class)
        idx2 = np.flatnonzero(f2.classes == feature_class)
        if len(idx2) == 0:
            continue
        m1, m2, dist = _match_class(f1, f2, idx1, idx2, cfg.search_radius)
        for i, j, d in zip(m1, m2, dist):
            out.append(
                Correspondence(
                    p1=(float(f1.positions[i, 0]), float(f1.positions[i, 1])),
                    p2=(float(f2.positions[j, 0]), float(f2.positions[j, 1])),
                    distance=float(d),
                    index1=int(i),
                    index2=int(j),
                )
            )
    logger.debug(f"{len(out)} mutually consistent matches from {len(f1)}x{len(f2)} features")
    return out


def correspondence_arrays(corr: Sequence[Correspondence]) -> tuple[np.ndarray, np.ndarray]:
    if not corr:
        return np.zeros((0, 2)), np.zeros((0, 2))
    p1 = np.array([c.p1 for c in corr], dtype=np.float64)
    p2 = np.array([c.p2 for c in corr], dtype=np.float64)
    return p1, p2


def correspondences_from_arrays(p1: np.ndarray, p2: np.ndarray) -> List[Correspondence]:
    return [
        Correspondence(p1=(float(a[0]), float(a[1])), p2=(float(b[0]), float(b[1])), distance=0.0)
        for a, b in zip(p1, p2)
    ]
