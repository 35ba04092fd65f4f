"""Learned RGB-to-grayscale transforms that maximize inlier feature matches across illumination change."""

from matchkit.version import get_version

__version__ = get_version()
