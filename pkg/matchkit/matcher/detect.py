#!/usr/bin/env python3

"""
Sparse feature detection with 5x5 blob and checkerboard filters, as used by
flow-style visual odometry front ends.

Responses are computed on the 8-bit-scaled image. Each local extremum above the
detection threshold becomes a feature of one of four classes, is refined to
subpixel precision with a parabola through its neighbours, and is described by
horizontal and vertical derivative responses sampled on a fixed grid around it.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, Sequence

import numpy as np

from matchkit.schema import MatcherConfig

logger = logging.getLogger(__name__)

BLOB_KERNEL = np.array(
    [
        [-1, -1, -1, -1, -1],
        [-1, 1, 1, 1, -1],
        [-1, 1, 8, 1, -1],
        [-1, 1, 1, 1, -1],
        [-1, -1, -1, -1, -1],
    ],
    dtype=np.float32,
)

CORNER_KERNEL = np.array(
    [
        [-1, -1, 0, 1, 1],
        [-1, -1, 0, 1, 1],
        [0, 0, 0, 0, 0],
        [1, 1, 0, -1, -1],
        [1, 1, 0, -1, -1],
    ],
    dtype=np.float32,
)

FILTER_RADIUS = 2


class ImageTooSmallError(ValueError):
    pass


class FeatureClass(IntEnum):
    BLOB_MAX = 0
    BLOB_MIN = 1
    CORNER_MAX = 2
    CORNER_MIN = 3


@dataclass(frozen=True)
class Feature:
    u: float
    v: float
    feature_class: FeatureClass
    descriptor: np.ndarray


@dataclass
class FeatureSet:
    """Features stored column-wise: positions (n, 2) as (u, v), classes (n,), descriptors (n, d)."""

    positions: np.ndarray
    classes: np.ndarray
    descriptors: np.ndarray

    def __len__(self):
        return len(self.classes)

    def __getitem__(self, i: int) -> Feature:
        return Feature(
            u=float(self.positions[i, 0]),
            v=float(self.positions[i, 1]),
            feature_class=FeatureClass(int(self.classes[i])),
            descriptor=self.descriptors[i],
        )

    def __iter__(self) -> Iterator[Feature]:
        for i in range(len(self)):
            yield self[i]


def descriptor_margin(offsets: Sequence[int]) -> int:
    # +1 for the Sobel support, +1 so subpixel refinement never leaves the margin
    return max(max(abs(o) for o in offsets) + 2, FILTER_RADIUS + 1)


def descriptor_length(offsets: Sequence[int]) -> int:
    return 2 * len(offsets) ** 2


def filter_responses(img8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    import cv2

    blob = cv2.filter2D(img8, cv2.CV_32F, BLOB_KERNEL, borderType=cv2.BORDER_REPLICATE)
    corner = cv2.filter2D(img8, cv2.CV_32F, CORNER_KERNEL, borderType=cv2.BORDER_REPLICATE)
    return blob, corner


def _parabolic_offset(left: np.ndarray, center: np.ndarray, right: np.ndarray) -> np.ndarray:
    denom = left - 2 * center + right
    safe = np.where(denom < 0, denom, -1.0)
    offset = np.where(denom < 0, 0.5 * (left - right) / safe, 0.0)
    return np.clip(offset, -0.5, 0.5)


def _extrema(response: np.ndarray, tau: float, r_nms: int, margin: int) -> np.ndarray:
    """Subpixel (u, v, score) of local maxima of response above tau, greedily thinned to r_nms."""
    from scipy.ndimage import maximum_filter

    h, w = response.shape
    local_max = response == maximum_filter(response, size=2 * r_nms + 1, mode="nearest")
    candidates = local_max & (response > tau)
    candidates[:margin, :] = False
    candidates[h - margin :, :] = False
    candidates[:, :margin] = False
    candidates[:, w - margin :] = False
    vs, us = np.nonzero(candidates)
    if len(vs) == 0:
        return np.zeros((0, 3))

    center = response[vs, us]
    du = _parabolic_offset(response[vs, us - 1], center, response[vs, us + 1])
    dv = _parabolic_offset(response[vs - 1, us], center, response[vs + 1, us])
    points = np.stack([us + du, vs + dv, center], axis=1)

    # strongest first; raster order breaks ties
    order = np.lexsort((np.arange(len(points)), -center))
    kept: list[int] = []
    for i in order:
        if kept:
            d = np.hypot(points[kept, 0] - points[i, 0], points[kept, 1] - points[i, 1])
            if np.any(d < r_nms):
                continue
        kept.append(i)
    return points[kept]


def sample_descriptors(
    du: np.ndarray, dv: np.ndarray, positions: np.ndarray, offsets: Sequence[int]
) -> np.ndarray:
    if len(positions) == 0:
        return np.zeros((0, descriptor_length(offsets)), dtype=np.float32)
    u = np.rint(positions[:, 0]).astype(np.int64)
    v = np.rint(positions[:, 1]).astype(np.int64)
    grid_v, grid_u = np.meshgrid(np.asarray(offsets), np.asarray(offsets), indexing="ij")
    sv = v[:, None] + grid_v.reshape(1, -1)
    su = u[:, None] + grid_u.reshape(1, -1)
    return np.concatenate([du[sv, su], dv[sv, su]], axis=1).astype(np.float32)


def detect_features(g: np.ndarray, cfg: MatcherConfig | None = None) -> FeatureSet:
    import cv2

    cfg = cfg or MatcherConfig()
    if g.ndim != 2:
        msg = f"detect_features expects a single-channel image, got shape {g.shape}"
        raise ValueError(msg)
    margin = descriptor_margin(cfg.descriptor_offsets)
    h, w = g.shape
    if h < 2 * margin + 1 or w < 2 * margin + 1:
        msg = f"image of {h}x{w} px is smaller than the {2 * margin + 1} px detector footprint"
        raise ImageTooSmallError(msg)

    img8 = (np.asarray(g, dtype=np.float32) * 255.0).astype(np.float32)
    blob, corner = filter_responses(img8)
    du = cv2.Sobel(img8, cv2.CV_32F, 1, 0, ksize=3, borderType=cv2.BORDER_REPLICATE)
    dv = cv2.Sobel(img8, cv2.CV_32F, 0, 1, ksize=3, borderType=cv2.BORDER_REPLICATE)

    positions, classes = [], []
    for feature_class, response, sign in (
        (FeatureClass.BLOB_MAX, blob, 1.0),
        (FeatureClass.BLOB_MIN, blob, -1.0),
        (FeatureClass.CORNER_MAX, corner, 1.0),
        (FeatureClass.CORNER_MIN, corner, -1.0),
    ):
        pts = _extrema(sign * response, cfg.tau_det, cfg.r_nms, margin)
        positions.append(pts[:, :2])
        classes.append(np.full(len(pts), int(feature_class), dtype=np.int8))

    all_positions = np.concatenate(positions, axis=0)
    all_classes = np.concatenate(classes, axis=0)
    descriptors = sample_descriptors(du, dv, all_positions, cfg.descriptor_offsets)
    logger.debug(f"Detected {len(all_classes)} features on a {h}x{w} image")
    return FeatureSet(positions=all_positions, classes=all_classes, descriptors=descriptors)
