#!/usr/bin/env python3

import logging
from typing import Sequence

import numpy as np

from matchkit.matcher.match import Correspondence, correspondence_arrays

logger = logging.getLogger(__name__)

SAMPLE_SIZE = 8


class TooFewCorrespondencesError(ValueError):
    pass


class NoModelError(RuntimeError):
    pass


def hartley_normalization(points: np.ndarray) -> np.ndarray | None:
    """Similarity moving the centroid to the origin with mean distance sqrt(2); None if points coincide."""
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    if not np.isfinite(mean_dist) or mean_dist < 1e-12:
        return None
    s = np.sqrt(2) / mean_dist
    return np.array(
        [
            [s, 0, -s * centroid[0]],
            [0, s, -s * centroid[1]],
            [0, 0, 1],
        ]
    )


def to_homogeneous(points: np.ndarray) -> np.ndarray:
    return np.hstack([points, np.ones((len(points), 1))])


def eight_point(p1: np.ndarray, p2: np.ndarray) -> np.ndarray | None:
    """Normalized eight-point estimate of F (x2^T F x1 = 0) with rank 2 enforced; None when degenerate."""
    if len(p1) < SAMPLE_SIZE:
        msg = f"eight_point needs at least {SAMPLE_SIZE} correspondences, got {len(p1)}"
        raise TooFewCorrespondencesError(msg)
    t1 = hartley_normalization(p1)
    t2 = hartley_normalization(p2)
    if t1 is None or t2 is None:
        return None
    x1 = to_homogeneous(p1) @ t1.T
    x2 = to_homogeneous(p2) @ t2.T

    a = np.column_stack(
        [
            x2[:, 0] * x1[:, 0],
            x2[:, 0] * x1[:, 1],
            x2[:, 0],
            x2[:, 1] * x1[:, 0],
            x2[:, 1] * x1[:, 1],
            x2[:, 1],
            x1[:, 0],
            x1[:, 1],
            np.ones(len(x1)),
        ]
    )
    try:
        _, _, vt = np.linalg.svd(a)
        f = vt[-1].reshape(3, 3)
        u, s, vt = np.linalg.svd(f)
    except np.linalg.LinAlgError:
        return None
    s[2] = 0.0
    f = u @ np.diag(s) @ vt
    f = t2.T @ f @ t1
    norm = np.linalg.norm(f)
    if not np.isfinite(norm) or norm < 1e-15:
        return None
    return f / norm


def sampson_distance(f: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """First-order geometric distance (pixels) of each correspondence to the epipolar constraint."""
    x1 = to_homogeneous(p1)
    x2 = to_homogeneous(p2)
    fx1 = x1 @ f.T
    ftx2 = x2 @ f
    num = np.sum(x2 * fx1, axis=1) ** 2
    den = fx1[:, 0] ** 2 + fx1[:, 1] ** 2 + ftx2[:, 0] ** 2 + ftx2[:, 1] ** 2
    d2 = np.where(num == 0, 0.0, num / np.maximum(den, 1e-300))
    return np.sqrt(d2)


def ransac_fundamental(
    corr: Sequence[Correspondence],
    iters: int = 2000,
    tau_epi: float = 1.0,
    seed: int = 0,
    refine: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Robust fundamental matrix from random minimal samples.

    Every iteration draws one eight-point sample from a generator seeded with
    `seed`, so the sample sequence is fixed by the seed alone. Inliers have a
    Sampson distance below tau_epi. With `refine`, the winning model is refit on
    its consensus set and kept if that does not lose inliers.
    """
    p1, p2 = correspondence_arrays(corr)
    n = len(p1)
    if n < SAMPLE_SIZE:
        msg = f"RANSAC needs at least {SAMPLE_SIZE} correspondences, got {n}"
        raise TooFewCorrespondencesError(msg)

    rng = np.random.default_rng(seed)
    best_f = None
    best_mask = np.zeros(n, dtype=bool)
    best_count = -1
    for _ in range(iters):
        sample = rng.choice(n, size=SAMPLE_SIZE, replace=False)
        f = eight_point(p1[sample], p2[sample])
        if f is None:
            continue
        mask = sampson_distance(f, p1, p2) < tau_epi
        count = int(mask.sum())
        if count > best_count:
            best_f, best_mask, best_count = f, mask, count

    if best_f is None:
        msg = f"all {iters} RANSAC samples were degenerate"
        raise NoModelError(msg)

    if refine and best_count >= SAMPLE_SIZE:
        refit = eight_point(p1[best_mask], p2[best_mask])
        if refit is not None:
            refit_mask = sampson_distance(refit, p1, p2) < tau_epi
            if refit_mask.sum() >= best_count:
                best_f, best_mask = refit, refit_mask

    logger.debug(f"RANSAC kept {int(best_mask.sum())}/{n} correspondences")
    return best_f, best_mask
