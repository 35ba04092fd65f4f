#!/usr/bin/env python3

"""
RGB-to-grayscale transforms: luma, weighted sums of log channel responses
(constant or encoder-derived weights), learned per-pixel MLPs, and the joint
pairwise rescaling onto [0, 1].

Channel index k = 1, 2, 3 maps to (red, green, blue). The color-constancy
derivation orders wavelengths as increasing with k while naming the channels
red, green, blue; this module keeps the index-to-channel assignment and lets the
solver accept either wavelength ordering.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import torch
from jaxtyping import Float
from torch import Tensor

from matchkit import config
from matchkit.nets import TransformModels, encoder_forward, mlp_forward
from matchkit.tensor import ShapeError, clamp, l1_normalize, mean

logger = logging.getLogger(__name__)

EPS_LOG = 1 / 255
EPS_SIGMA = 1e-5

RgbImage = Float[Tensor, "n 3 h w"]
GrayImage = Float[Tensor, "n 1 h w"]
RawImage = Float[Tensor, "n 1 h w"]


class DegenerateWavelengthsError(ValueError):
    pass


class ModelMissingError(ValueError):
    pass


@dataclass
class RescaleStats:
    mu: Tensor
    sigma: Tensor


def _check_rgb(rgb: Tensor) -> None:
    if rgb.dim() != 4 or rgb.shape[1] != 3:
        msg = f"expected an [N, 3, H, W] RGB batch, got {tuple(rgb.shape)}"
        raise ShapeError(msg)


def gray(rgb: RgbImage) -> GrayImage:
    _check_rgb(rgb)
    weights = torch.tensor(config.LUMA_WEIGHTS, dtype=rgb.dtype)
    return torch.einsum("c,nchw->nhw", weights, rgb).unsqueeze(1)


def _theta_batch(theta: Tensor, n: int) -> Tensor:
    if theta.dim() == 1:
        theta = theta[None, :].expand(n, -1)
    if theta.shape != (n, 3):
        msg = f"theta must be [3] or [{n}, 3], got {tuple(theta.shape)}"
        raise ShapeError(msg)
    return theta


def sumlog_raw(rgb: RgbImage, theta: Tensor, eps_log: float = EPS_LOG) -> RawImage:
    """Per pixel, sum_k theta_k * log(c_k + eps_log)."""
    _check_rgb(rgb)
    theta = _theta_batch(theta.to(rgb.dtype), rgb.shape[0])
    logs = torch.log(rgb + eps_log)
    return torch.einsum("nc,nchw->nhw", theta, logs).unsqueeze(1)


def solve_constrained_weights(
    lambda1: float, lambda2: float, lambda3: float
) -> Tuple[float, float]:
    """
    Weights (alpha, beta) with 1/l2 = alpha/l1 + beta/l3 and beta = 1 - alpha.

    The invariant image is log I(l2) - alpha log I(l1) - beta log I(l3).
    """
    if min(lambda1, lambda2, lambda3) <= 0:
        msg = f"wavelengths must be positive, got {(lambda1, lambda2, lambda3)}"
        raise DegenerateWavelengthsError(msg)
    if lambda1 == lambda3:
        msg = f"lambda1 and lambda3 must differ, got {lambda1}"
        raise DegenerateWavelengthsError(msg)
    if not min(lambda1, lambda3) <= lambda2 <= max(lambda1, lambda3):
        msg = f"lambda2={lambda2} must lie between lambda1={lambda1} and lambda3={lambda3}"
        raise DegenerateWavelengthsError(msg)
    alpha = (1 / lambda2 - 1 / lambda3) / (1 / lambda1 - 1 / lambda3)
    beta = 1.0 - alpha
    return alpha, beta


def constrained_params(wavelengths: Sequence[float] = config.DEFAULT_WAVELENGTHS_NM) -> Tensor:
    alpha, beta = solve_constrained_weights(*wavelengths)
    return l1_normalize(torch.tensor([-alpha, 1.0, -beta]))


def rescale_stats(raw1: RawImage, raw2: RawImage) -> RescaleStats:
    both = torch.cat([raw1, raw2], dim=1)
    mu = mean(both, dims=(1, 2, 3), keepdim=True)
    sigma = mean((both - mu) ** 2, dims=(1, 2, 3), keepdim=True).sqrt()
    return RescaleStats(mu=mu, sigma=sigma)


def rescale_pair(
    raw1: RawImage, raw2: RawImage, eps_sigma: float = EPS_SIGMA
) -> Tuple[GrayImage, GrayImage]:
    """Standardize jointly, clamp three standard deviations onto [0, 1]."""
    if raw1.shape != raw2.shape:
        msg = f"rescale_pair shapes differ: {tuple(raw1.shape)} vs {tuple(raw2.shape)}"
        raise ShapeError(msg)
    stats = rescale_stats(raw1, raw2)
    scale = 3 * torch.clamp(stats.sigma, min=eps_sigma)
    out1 = 0.5 * clamp((raw1 - stats.mu) / scale, -1.0, 1.0) + 0.5
    out2 = 0.5 * clamp((raw2 - stats.mu) / scale, -1.0, 1.0) + 0.5
    return out1, out2


def apply_transform(
    kind: "str | config.TransformKindConfig",
    rgb1: RgbImage,
    rgb2: RgbImage,
    models: TransformModels | None = None,
    fixed_theta: Tensor | None = None,
    eps_log: float = EPS_LOG,
    eps_sigma: float = EPS_SIGMA,
) -> Tuple[GrayImage, GrayImage]:
    kind_config = config.get_transform_kind(kind)

    if not kind_config.rescaled:
        return gray(rgb1), gray(rgb2)

    if kind_config.uses_theta:
        theta = fixed_theta
        if theta is None and models is not None and models.theta is not None:
            theta = l1_normalize(models.theta)
        if theta is None:
            msg = "SumLog needs a fixed theta or a bundle holding one"
            raise ModelMissingError(msg)
        return rescale_pair(
            sumlog_raw(rgb1, theta, eps_log), sumlog_raw(rgb2, theta, eps_log), eps_sigma
        )

    if kind_config.uses_encoder and (models is None or models.encoder is None):
        msg = f"{kind_config.name} needs an encoder model"
        raise ModelMissingError(msg)
    if kind_config.uses_mlp and (models is None or models.mlp is None):
        msg = f"{kind_config.name} needs an MLP transform model"
        raise ModelMissingError(msg)
    assert models is not None

    theta = None
    if kind_config.uses_encoder:
        # one theta per pair, shared by both images
        theta = encoder_forward(models.encoder, rgb1, rgb2)

    if kind_config.uses_mlp:
        raw1 = mlp_forward(models.mlp, rgb1, theta)
        raw2 = mlp_forward(models.mlp, rgb2, theta)
    else:
        raw1 = sumlog_raw(rgb1, theta, eps_log)
        raw2 = sumlog_raw(rgb2, theta, eps_log)
    return rescale_pair(raw1, raw2, eps_sigma)
