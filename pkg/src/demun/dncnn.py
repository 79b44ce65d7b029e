"""DnCNN projector: conv+ReLU, depth_L x (conv+BN+ReLU), conv; optional residual output."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import BatchNormState, ShapeError, Tensor, batch_norm, conv2d, relu


@dataclass(frozen=True)
class DnCNNConfig:
    depth_L: int = 5
    channels: int = 64
    kernel: int = 3
    image_k: int = 50

    def __post_init__(self):
        if self.depth_L < 0:
            raise ValueError(f"depth_L must be >= 0, got {self.depth_L}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")

    def parameter_count(self) -> int:
        c, kk = self.channels, self.kernel**2
        first = c * kk + c
        block = c * c * kk + c + 2 * c
        last = c * kk + 1
        return first + self.depth_L * block + last


@dataclass
class ConvBlock:
    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState


@dataclass
class ProjectorParams:
    config: DnCNNConfig
    residual: bool
    in_weight: Tensor
    in_bias: Tensor
    blocks: list[ConvBlock] = field(default_factory=list)
    out_weight: Tensor = None
    out_bias: Tensor = None

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"in.weight": self.in_weight, "in.bias": self.in_bias}
        for i, b in enumerate(self.blocks):
            named[f"block{i}.weight"] = b.weight
            named[f"block{i}.bias"] = b.bias
            named[f"block{i}.gamma"] = b.gamma
            named[f"block{i}.beta"] = b.beta
        named["out.weight"] = self.out_weight
        named["out.bias"] = self.out_bias
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.blocks):
            out[f"block{i}.running_mean"] = b.bn.running_mean
            out[f"block{i}.running_var"] = b.bn.running_var
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for i, b in enumerate(self.blocks):
            b.bn.running_mean = np.array(buffers[f"block{i}.running_mean"], dtype=np.float64)
            b.bn.running_var = np.array(buffers[f"block{i}.running_var"], dtype=np.float64)


def _uniform_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> tuple[Tensor, Tensor]:
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for kernel and bias
    bound = 1.0 / math.sqrt(c_in * k * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
    b = rng.uniform(-bound, bound, size=(c_out,))
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


def build_projector(config: DnCNNConfig, seed, residual: bool = False) -> ProjectorParams:
    rng = np.random.default_rng(seed)
    c, k = config.channels, config.kernel
    in_w, in_b = _uniform_conv(rng, c, 1, k)
    blocks = []
    for _ in range(config.depth_L):
        w, b = _uniform_conv(rng, c, c, k)
        blocks.append(
            ConvBlock(
                w,
                b,
                Tensor(np.ones(c), requires_grad=True),
                Tensor(np.zeros(c), requires_grad=True),
                BatchNormState(c),
            )
        )
    out_w, out_b = _uniform_conv(rng, 1, c, k)
    return ProjectorParams(config, residual, in_w, in_b, blocks, out_w, out_b)


def project(params: ProjectorParams, x_img: Tensor, training: bool = False, update_stats: bool = True) -> Tensor:
    """Apply the projector to a (B, 1, k, k) batch; shape is preserved."""
    k = params.config.image_k
    if x_img.data.ndim != 4 or x_img.shape[1:] != (1, k, k):
        raise ShapeError(f"projector expects (B, 1, {k}, {k}), got {x_img.shape}")
    h = relu(conv2d(x_img, params.in_weight, params.in_bias))
    for b in params.blocks:
        h = conv2d(h, b.weight, b.bias)
        h = relu(batch_norm(h, b.gamma, b.beta, b.bn, training, update_stats))
    out = conv2d(h, params.out_weight, params.out_bias)
    if params.residual:
        out = x_img + out
    return out
