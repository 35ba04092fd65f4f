#!/usr/bin/env python3

"""
Differentiable operations used by every network in matchkit.

Values, gradients and the backward graph are torch tensors; this module pins down
the handful of operations the networks need, the shape contracts they enforce,
and the Adam state used by the training loop.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import torch
from jaxtyping import Float
from torch import Tensor
from torch.nn import functional

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
NORM_EPS = 1e-8


class ShapeError(ValueError):
    pass


class DegenerateNormError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


def _require_rank(name: str, x: Tensor, rank: int) -> None:
    if x.dim() != rank:
        msg = f"{name} must have rank {rank}, got shape {tuple(x.shape)}"
        raise ShapeError(msg)


def conv2d(
    input: Float[Tensor, "n cin h w"],
    weight: Float[Tensor, "cout cin k k"],
    bias: Float[Tensor, "cout"] | None,
    stride: int = 1,
    padding: int = 0,
) -> Float[Tensor, "n cout hout wout"]:
    _require_rank("conv2d input", input, 4)
    _require_rank("conv2d weight", weight, 4)
    if input.shape[1] != weight.shape[1]:
        msg = f"conv2d input has {input.shape[1]} channels but weight expects {weight.shape[1]}"
        raise ShapeError(msg)
    if bias is not None and bias.shape != (weight.shape[0],):
        msg = f"conv2d bias shape {tuple(bias.shape)} does not match {weight.shape[0]} output channels"
        raise ShapeError(msg)
    if stride < 1 or weight.shape[2] < 1:
        msg = f"conv2d needs stride >= 1 and kernel >= 1, got stride={stride}"
        raise ShapeError(msg)
    k_h, k_w = weight.shape[2], weight.shape[3]
    out_h = (input.shape[2] + 2 * padding - k_h) // stride + 1
    out_w = (input.shape[3] + 2 * padding - k_w) // stride + 1
    if out_h < 1 or out_w < 1:
        msg = f"conv2d output would be empty for input {tuple(input.shape)} and kernel {k_h}x{k_w}"
        raise ShapeError(msg)
    return functional.conv2d(input, weight, bias, stride=stride, padding=padding)


def prelu(input: Tensor, slope: Float[Tensor, "c"]) -> Tensor:
    if input.dim() < 2:
        msg = f"prelu input needs a channel dimension, got shape {tuple(input.shape)}"
        raise ShapeError(msg)
    if slope.numel() != input.shape[1]:
        msg = f"prelu slope has {slope.numel()} entries for {input.shape[1]} channels"
        raise ShapeError(msg)
    return functional.prelu(input, slope)


@dataclass
class RunningStats:
    mean: Tensor
    var: Tensor


def batch_norm(
    input: Float[Tensor, "n c h w"],
    gain: Float[Tensor, "c"],
    shift: Float[Tensor, "c"],
    running_stats: RunningStats,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Float[Tensor, "n c h w"]:
    _require_rank("batch_norm input", input, 4)
    channels = input.shape[1]
    for name, t in (("gain", gain), ("shift", shift)):
        if t.shape != (channels,):
            msg = f"batch_norm {name} shape {tuple(t.shape)} does not match {channels} channels"
            raise ShapeError(msg)
    if training and input.shape[0] * input.shape[2] * input.shape[3] < 2:
        msg = "batch_norm in train mode needs at least two values per channel"
        raise ShapeError(msg)
    return functional.batch_norm(
        input,
        running_stats.mean,
        running_stats.var,
        weight=gain,
        bias=shift,
        training=training,
        momentum=momentum,
        eps=eps,
    )


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        msg = f"residual_add shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
        raise ShapeError(msg)
    return a + b


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    first = tensors[0]
    for t in tensors[1:]:
        if t.dim() != first.dim() or t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            msg = f"concat_channels shapes incompatible: {tuple(first.shape)} vs {tuple(t.shape)}"
            raise ShapeError(msg)
    return torch.cat(list(tensors), dim=1)


def concat_batch(tensors: Sequence[Tensor]) -> Tensor:
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape[1:] != first.shape[1:]:
            msg = f"concat_batch shapes incompatible: {tuple(first.shape)} vs {tuple(t.shape)}"
            raise ShapeError(msg)
    return torch.cat(list(tensors), dim=0)


def fully_connected(
    input: Float[Tensor, "n cin 1 1"] | Float[Tensor, "n cin"],
    weight: Float[Tensor, "cout cin 1 1"],
    bias: Float[Tensor, "cout"] | None,
) -> Float[Tensor, "n cout"]:
    """Affine map expressed as a 1x1 convolution over a 1x1 spatial map."""
    if input.dim() == 2:
        input = input[:, :, None, None]
    if input.shape[2:] != (1, 1):
        msg = f"fully_connected expects a 1x1 spatial map, got {tuple(input.shape)}"
        raise ShapeError(msg)
    return conv2d(input, weight, bias).flatten(1)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        msg = f"mse_loss shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}"
        raise ShapeError(msg)
    return ((pred - target) ** 2).mean()


def mean(x: Tensor, dims: Sequence[int] | None = None, keepdim: bool = False) -> Tensor:
    if dims is None:
        return x.mean()
    return x.mean(dim=tuple(dims), keepdim=keepdim)


def l1_normalize(x: Tensor, dim: int = -1, eps: float = NORM_EPS) -> Tensor:
    norm = x.abs().sum(dim=dim, keepdim=True)
    if bool((norm < eps).any()):
        msg = f"l1_normalize on a vector with L1 norm below {eps}: degenerate encoder output"
        raise DegenerateNormError(msg)
    return x / norm


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    # gradient passes through inside [lo, hi] and is zero outside
    return torch.clamp(x, lo, hi)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    if loss.numel() != 1:
        msg = f"backward needs a scalar loss, got shape {tuple(loss.shape)}"
        raise GradientError(msg)
    if not loss.requires_grad:
        msg = "backward called on a loss that does not depend on any trainable tensor"
        raise GradientError(msg)
    loss.backward(retain_graph=retain_graph)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.detach_()
            p.grad.zero_()


def ensure_grads(params: Iterable[Tensor]) -> None:
    """Materialize zero grad buffers so every parameter has a same-shape gradient."""
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = torch.zeros_like(p)


class AdamState:
    """Bias-corrected Adam moments for a fixed list of parameters."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params: List[Tensor] = list(params)
        if not self.params:
            msg = "AdamState needs at least one parameter"
            raise ValueError(msg)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.shapes = [tuple(p.shape) for p in self.params]
        self.optimizer = torch.optim.Adam(
            self.params, lr=lr, betas=(beta1, beta2), eps=eps, foreach=False
        )

    def moments(self, param: Tensor) -> tuple[Tensor, Tensor]:
        state = self.optimizer.state.get(param)
        if not state:
            return torch.zeros_like(param), torch.zeros_like(param)
        return state["exp_avg"], state["exp_avg_sq"]

    def __repr__(self):
        return f"<AdamState params={len(self.params)} step={self.step_count} lr={self.lr}>"


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    if len(params) != len(state.params) or any(
        p is not q for p, q in zip(params, state.params)
    ):
        msg = "adam_step parameters do not match the optimizer state"
        raise ShapeError(msg)
    for p, shape in zip(params, state.shapes):
        if tuple(p.shape) != shape:
            msg = f"parameter shape drifted from {shape} to {tuple(p.shape)}"
            raise ShapeError(msg)
        exp_avg, _ = state.moments(p)
        if exp_avg.shape != p.shape:
            msg = f"moment buffer shape {tuple(exp_avg.shape)} does not match parameter {tuple(p.shape)}"
            raise ShapeError(msg)
    ensure_grads(params)
    state.optimizer.step()
    state.step_count += 1
