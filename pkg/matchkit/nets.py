#!/usr/bin/env python3

"""
The three networks: the siamese match-count proxy, the siamese pairwise encoder,
and the per-pixel MLP transform.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, List

import torch
from einops import repeat
from jaxtyping import Float
from torch import Tensor, nn

from matchkit import config
from matchkit.schema import NetsConfig
from matchkit.tensor import (
    RunningStats,
    ShapeError,
    batch_norm,
    concat_batch,
    concat_channels,
    conv2d,
    fully_connected,
    l1_normalize,
    mean,
    prelu,
    residual_add,
)
from matchkit.utils import seeded

logger = logging.getLogger(__name__)

PRELU_INIT = 0.25


class ModelMismatchError(ValueError):
    pass


def init_fan_in_uniform(weight: Tensor) -> None:
    fan_in = weight.shape[1] * weight.shape[2] * weight.shape[3]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound)


class ConvBlock(nn.Module):
    """Convolution, batch normalization and PReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 2):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.gain = nn.Parameter(torch.ones(out_channels))
        self.shift = nn.Parameter(torch.zeros(out_channels))
        self.slope = nn.Parameter(torch.full((out_channels,), PRELU_INIT))
        self.register_buffer("running_mean", torch.zeros(out_channels))
        self.register_buffer("running_var", torch.ones(out_channels))
        init_fan_in_uniform(self.weight)

    def forward(self, x: Tensor, activate: bool = True) -> Tensor:
        y = conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        y = batch_norm(
            y,
            self.gain,
            self.shift,
            RunningStats(self.running_mean, self.running_var),
            training=self.training,
        )
        if not activate:
            return y
        return prelu(y, self.slope)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv1 = ConvBlock(channels, channels, kernel_size, stride=1)
        self.conv2 = ConvBlock(channels, channels, kernel_size, stride=1)
        self.slope = nn.Parameter(torch.full((channels,), PRELU_INIT))

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv1(x)
        y = self.conv2(y, activate=False)
        return prelu(residual_add(x, y), self.slope)


def build_stages(in_channels: int, widths: List[int], residual_blocks: int, kernel_size: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    channels = in_channels
    for i, width in enumerate(widths):
        layers.append(ConvBlock(channels, width, kernel_size, stride=2))
        channels = width
        if i < len(widths) - 1:
            layers.extend(ResidualBlock(width, kernel_size) for _ in range(residual_blocks))
    return nn.Sequential(*layers)


class SiameseNet(nn.Module):
    """Shared branch applied to both inputs, concatenated, then a trunk and a pooled FC head."""

    def __init__(self, in_channels: int, out_dim: int, cfg: NetsConfig):
        super().__init__()
        self.in_channels = in_channels
        self.out_dim = out_dim
        self.cfg = cfg
        k = cfg.kernel_size
        self.branch = build_stages(in_channels, cfg.branch_widths, cfg.residual_blocks, k)
        self.trunk = build_stages(2 * cfg.branch_widths[-1], cfg.trunk_widths, cfg.residual_blocks, k)
        self.head_weight = nn.Parameter(torch.empty(out_dim, cfg.trunk_widths[-1], 1, 1))
        self.head_bias = nn.Parameter(torch.zeros(out_dim))
        init_fan_in_uniform(self.head_weight)

    def branch_forward(self, x: Tensor) -> Tensor:
        return self.branch(x)

    def forward(self, x1: Tensor, x2: Tensor) -> Float[Tensor, "n d"]:
        if x1.shape != x2.shape:
            msg = f"pair inputs differ in shape: {tuple(x1.shape)} vs {tuple(x2.shape)}"
            raise ShapeError(msg)
        if x1.dim() != 4 or x1.shape[1] != self.in_channels:
            msg = f"expected [N, {self.in_channels}, H, W] inputs, got {tuple(x1.shape)}"
            raise ShapeError(msg)
        n = x1.shape[0]
        # one pass over both inputs so the shared branch sees a single batch
        feats = self.branch_forward(concat_batch([x1, x2]))
        x = concat_channels([feats[:n], feats[n:]])
        x = self.trunk(x)
        pooled = mean(x, dims=(2, 3), keepdim=True)
        return fully_connected(pooled, self.head_weight, self.head_bias)


class ProxyModel(SiameseNet):
    def __init__(self, cfg: NetsConfig):
        super().__init__(in_channels=1, out_dim=1, cfg=cfg)


class EncoderModel(SiameseNet):
    def __init__(self, cfg: NetsConfig):
        super().__init__(in_channels=3, out_dim=3, cfg=cfg)


class PointwiseLayer(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        init_fan_in_uniform(self.weight)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class MlpTransform(nn.Module):
    """Per-pixel MLP made of 1x1 convolutions with PReLU between layers."""

    def __init__(self, cfg: NetsConfig, with_context: bool = False):
        super().__init__()
        self.with_context = with_context
        self.in_channels = 6 if with_context else 3
        widths = [self.in_channels, *cfg.mlp_hidden, 1]
        self.layers = nn.ModuleList(
            PointwiseLayer(a, b) for a, b in zip(widths[:-1], widths[1:])
        )
        self.slopes = nn.ParameterList(
            nn.Parameter(torch.full((w,), PRELU_INIT)) for w in cfg.mlp_hidden
        )

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.slopes):
                x = prelu(x, self.slopes[i])
        return x


def build_proxy(cfg: NetsConfig, seed: int | None = None) -> ProxyModel:
    with seeded(seed):
        model = ProxyModel(cfg)
    logger.debug(f"Built proxy with {parameter_count(model)} parameters")
    return model


def build_encoder(cfg: NetsConfig, seed: int | None = None) -> EncoderModel:
    with seeded(seed):
        model = EncoderModel(cfg)
    logger.debug(f"Built encoder with {parameter_count(model)} parameters")
    return model


def build_mlp(cfg: NetsConfig, with_context: bool, seed: int | None = None) -> MlpTransform:
    with seeded(seed):
        model = MlpTransform(cfg, with_context=with_context)
    logger.debug(f"Built MLP transform (context={with_context}) with {parameter_count(model)} parameters")
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def proxy_forward(model: ProxyModel, g1: Tensor, g2: Tensor) -> Float[Tensor, "n"]:
    if g1.shape[0] != g2.shape[0]:
        msg = f"batch sizes differ: {g1.shape[0]} vs {g2.shape[0]}"
        raise ShapeError(msg)
    return model(g1, g2).reshape(-1)


def encoder_forward(model: EncoderModel, rgb1: Tensor, rgb2: Tensor) -> Float[Tensor, "n 3"]:
    return l1_normalize(model(rgb1, rgb2), dim=1)


def mlp_forward(
    model: MlpTransform, rgb: Float[Tensor, "n 3 h w"], theta: Float[Tensor, "n 3"] | None = None
) -> Float[Tensor, "n 1 h w"]:
    if model.with_context and theta is None:
        msg = "this MLP transform was built with context and needs theta"
        raise ModelMismatchError(msg)
    if not model.with_context and theta is not None:
        msg = "this MLP transform was built without context but theta was given"
        raise ModelMismatchError(msg)
    if theta is None:
        return model(rgb)
    if theta.dim() == 1:
        theta = theta[None, :].expand(rgb.shape[0], -1)
    context = repeat(theta, "n c -> n c h w", h=rgb.shape[2], w=rgb.shape[3])
    return model(concat_channels([rgb, context]))


@contextmanager
def freeze(*modules: nn.Module | None):
    """Stop gradient flow into the given modules and put them in eval mode."""
    modules = tuple(m for m in modules if m is not None)
    saved = [
        (m.training, [(p, p.requires_grad) for p in m.parameters()]) for m in modules
    ]
    for m in modules:
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
    try:
        yield
    finally:
        for m, (training, flags) in zip(modules, saved):
            m.train(training)
            for p, flag in flags:
                p.requires_grad_(flag)


@dataclass
class TransformModels:
    kind: str
    encoder: EncoderModel | None = None
    mlp: MlpTransform | None = None
    theta: nn.Parameter | None = None

    def modules(self) -> List[nn.Module]:
        return [m for m in (self.encoder, self.mlp) if m is not None]

    def parameters(self) -> Iterator[nn.Parameter]:
        for m in self.modules():
            yield from m.parameters()
        if self.theta is not None:
            yield self.theta

    def train(self, mode: bool = True) -> "TransformModels":
        for m in self.modules():
            m.train(mode)
        return self

    def eval(self) -> "TransformModels":
        return self.train(False)

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.encoder is not None:
            out.update({f"encoder.{k}": v for k, v in self.encoder.state_dict().items()})
        if self.mlp is not None:
            out.update({f"mlp.{k}": v for k, v in self.mlp.state_dict().items()})
        if self.theta is not None:
            out["theta"] = self.theta.detach()
        return out


def build_transform_models(kind: str, cfg: NetsConfig, seed: int | None = None) -> TransformModels:
    kind_config = config.get_transform_kind(kind)
    models = TransformModels(kind=kind_config.primary_alias)
    if kind_config.uses_encoder:
        models.encoder = build_encoder(cfg, seed=seed)
    if kind_config.uses_mlp:
        mlp_seed = None if seed is None else seed + 1
        models.mlp = build_mlp(cfg, with_context=kind_config.uses_encoder, seed=mlp_seed)
    if kind_config.uses_theta:
        models.theta = nn.Parameter(torch.full((3,), 1.0 / 3.0))
    return models
