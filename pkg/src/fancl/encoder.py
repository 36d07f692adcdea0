"""Dual-branch convolutional feature extractors and the fusion layer.

Each branch is ``[conv3x3/2 -> BN -> ReLU] * stages -> GAP -> linear ->
BN1d -> L2``. Both branches share the architecture and differ only in
their parameters; the fusion layer maps ``concat(f, f_noised)`` (2D) back
to D and re-normalizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fancl.errors import ConfigError, ShapeError
from fancl.tensorcore import (
    BatchNormStats,
    Tensor,
    batchnorm2d,
    concat,
    conv2d,
    global_avg_pool,
    l2_normalize,
    linear,
    relu,
)


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    embed_dim: int = 64
    height: int = 32
    width: int = 32
    in_channels: int = 3
    kernel: int = 3
    stride: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.embed_dim < 2:
            raise ConfigError(f"embedding dim must be >= 2, got {self.embed_dim}")
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"stage channel counts must be >= 1, got {list(self.channels)}")


@dataclass
class BranchParams:
    conv_w: list[Tensor]
    conv_b: list[Tensor]
    bn_gamma: list[Tensor]
    bn_beta: list[Tensor]
    bn_stats: list[BatchNormStats]
    proj_w: Tensor
    proj_b: Tensor
    head_gamma: Tensor
    head_beta: Tensor
    head_stats: BatchNormStats
    config: EncoderConfig = field(default_factory=EncoderConfig)

    def parameters(self) -> list[Tensor]:
        """Trainable tensors in a fixed order (also the checkpoint order)."""
        out: list[Tensor] = []
        for i in range(len(self.conv_w)):
            out += [self.conv_w[i], self.conv_b[i], self.bn_gamma[i], self.bn_beta[i]]
        return out + [self.proj_w, self.proj_b, self.head_gamma, self.head_beta]

    def named_tensors(self) -> dict[str, np.ndarray]:
        named = {}
        for i in range(len(self.conv_w)):
            named[f"stage{i}.conv_w"] = self.conv_w[i].data
            named[f"stage{i}.conv_b"] = self.conv_b[i].data
            named[f"stage{i}.bn_gamma"] = self.bn_gamma[i].data
            named[f"stage{i}.bn_beta"] = self.bn_beta[i].data
            named[f"stage{i}.bn_mean"] = self.bn_stats[i].mean
            named[f"stage{i}.bn_var"] = self.bn_stats[i].var
        named.update({
            "proj_w": self.proj_w.data,
            "proj_b": self.proj_b.data,
            "head_gamma": self.head_gamma.data,
            "head_beta": self.head_beta.data,
            "head_mean": self.head_stats.mean,
            "head_var": self.head_stats.var,
        })
        return named

    def load_named(self, named: dict[str, np.ndarray]) -> None:
        for i in range(len(self.conv_w)):
            self.conv_w[i].data = named[f"stage{i}.conv_w"]
            self.conv_b[i].data = named[f"stage{i}.conv_b"]
            self.bn_gamma[i].data = named[f"stage{i}.bn_gamma"]
            self.bn_beta[i].data = named[f"stage{i}.bn_beta"]
            self.bn_stats[i].mean = named[f"stage{i}.bn_mean"]
            self.bn_stats[i].var = named[f"stage{i}.bn_var"]
        self.proj_w.data = named["proj_w"]
        self.proj_b.data = named["proj_b"]
        self.head_gamma.data = named["head_gamma"]
        self.head_beta.data = named["head_beta"]
        self.head_stats.mean = named["head_mean"]
        self.head_stats.var = named["head_var"]


@dataclass
class FusionParams:
    weight: Tensor
    bias: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def uniform_bound(fan_in: int) -> float:
    return float(np.sqrt(1.0 / fan_in))


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = uniform_bound(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True, dtype=dtype)


def _init_branch(config: EncoderConfig, rng: np.random.Generator, dtype) -> BranchParams:
    k = config.kernel
    conv_w, conv_b, gam, bet, stats = [], [], [], [], []
    c_in = config.in_channels
    for c_out in config.channels:
        conv_w.append(_uniform(rng, (k, k, c_in, c_out), k * k * c_in, dtype))
        conv_b.append(Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, dtype=dtype))
        gam.append(Tensor(np.ones(c_out, dtype=dtype), requires_grad=True, dtype=dtype))
        bet.append(Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, dtype=dtype))
        stats.append(BatchNormStats(c_out, dtype=dtype))
        c_in = c_out
    d = config.embed_dim
    return BranchParams(
        conv_w=conv_w,
        conv_b=conv_b,
        bn_gamma=gam,
        bn_beta=bet,
        bn_stats=stats,
        proj_w=_uniform(rng, (c_in, d), c_in, dtype),
        proj_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True, dtype=dtype),
        head_gamma=Tensor(np.ones(d, dtype=dtype), requires_grad=True, dtype=dtype),
        head_beta=Tensor(np.zeros(d, dtype=dtype), requires_grad=True, dtype=dtype),
        head_stats=BatchNormStats(d, dtype=dtype),
        config=config,
    )


def init_params(config: EncoderConfig, seed: int, dtype=np.float32):
    """Seeded init of (theta, theta_noised, phi) from independent substreams."""
    streams = np.random.SeedSequence(seed % 2**64).spawn(3)
    theta = _init_branch(config, np.random.default_rng(streams[0]), dtype)
    theta_n = _init_branch(config, np.random.default_rng(streams[1]), dtype)
    d = config.embed_dim
    rng = np.random.default_rng(streams[2])
    phi = FusionParams(
        weight=_uniform(rng, (2 * d, d), 2 * d, dtype),
        bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True, dtype=dtype),
    )
    return theta, theta_n, phi


def forward_branch(params: BranchParams, images, training: bool = False) -> Tensor:
    """Embed an (N, H, W, C) batch into unit-norm (N, D) features.

    In training mode batchnorm uses batch statistics and refreshes the
    running estimates; otherwise the running estimates are used.
    """
    cfg = params.config
    x = images if isinstance(images, Tensor) else Tensor(images)
    expected = (cfg.height, cfg.width, cfg.in_channels)
    if x.data.ndim != 4 or tuple(x.data.shape[1:]) != expected:
        raise ShapeError(f"forward_branch: image batch dims {x.dims} do not match (N, {', '.join(map(str, expected))})")
    pad = cfg.kernel // 2
    for i in range(len(params.conv_w)):
        x = conv2d(x, params.conv_w[i], params.conv_b[i], stride=cfg.stride, pad=pad)
        x = batchnorm2d(x, params.bn_gamma[i], params.bn_beta[i], params.bn_stats[i], training)
        x = relu(x)
    x = global_avg_pool(x)
    x = linear(x, params.proj_w, params.proj_b)
    x = batchnorm2d(x, params.head_gamma, params.head_beta, params.head_stats, training)
    return l2_normalize(x)


def forward_fusion(phi: FusionParams, f, f_noised) -> Tensor:
    """Fused embedding ``l2_normalize(concat(f, f_noised) @ W + b)``."""
    f = f if isinstance(f, Tensor) else Tensor(f)
    f_noised = f_noised if isinstance(f_noised, Tensor) else Tensor(f_noised)
    d = phi.bias.data.shape[0]
    if f.data.ndim != 2 or f.data.shape != f_noised.data.shape or f.data.shape[1] != d:
        raise ShapeError(f"forward_fusion: feature dims {f.dims} and {f_noised.dims} must both be (N, {d})")
    return l2_normalize(linear(concat([f, f_noised], axis=1), phi.weight, phi.bias))
