#!/usr/bin/env python3

"""
Conversions between 8-bit PNG files, float numpy images, and planar torch batches.

Numpy images are HxW (gray) or HxWx3 (RGB) float32 in [0,1]; torch batches are
[N, C, H, W].
"""

import logging
import os
from typing import TYPE_CHECKING

import numpy as np
import torch
from einops import rearrange
from jaxtyping import Float

if TYPE_CHECKING:
    from PIL import Image

logger = logging.getLogger(__name__)


def load_png(path: str, mode: str = "RGB") -> np.ndarray:
    from PIL import Image, ImageOps

    if not os.path.exists(path):
        msg = f"File does not exist: {path}"
        raise FileNotFoundError(msg)
    with Image.open(path) as img:
        img = ImageOps.exif_transpose(img).convert(mode)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    logger.debug(f"Loaded input 🖼  of size {arr.shape} from {path}")
    return arr


def load_rgb(path: str) -> np.ndarray:
    return load_png(path, "RGB")


def load_gray(path: str) -> np.ndarray:
    return load_png(path, "L")


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def numpy_img_to_pillow_img(img: np.ndarray) -> "Image.Image":
    from PIL import Image

    arr = quantize(img)
    if arr.ndim == 2:
        return Image.fromarray(arr, mode="L")
    return Image.fromarray(arr, mode="RGB")


def save_png(img: np.ndarray, path: str) -> None:
    # fixed encoder settings keep outputs byte-reproducible
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    numpy_img_to_pillow_img(img).save(path, format="PNG", optimize=False, compress_level=6)


def resize_to_height(img: np.ndarray, height: int) -> np.ndarray:
    import cv2

    h, w = img.shape[:2]
    if h == height:
        return img
    width = max(1, int(round(w * height / h)))
    interpolation = cv2.INTER_AREA if height < h else cv2.INTER_LINEAR
    return cv2.resize(img, (width, height), interpolation=interpolation)


def numpy_to_torch(img: np.ndarray) -> Float[torch.Tensor, "1 c h w"]:
    if img.ndim == 2:
        img = img[:, :, None]
    return torch.from_numpy(rearrange(img, "h w c -> 1 c h w").copy()).to(
        torch.get_default_dtype()
    )


def torch_to_numpy(img: Float[torch.Tensor, "c h w"]) -> np.ndarray:
    arr = rearrange(img.detach().cpu().to(torch.float32), "c h w -> h w c").numpy()
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    return arr
