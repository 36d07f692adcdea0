"""Feature-aware noise addition.

A frozen single-channel 3x3 probe produces an activation map; the
``round(rho * H * W)`` highest-activation pixels get pepper noise (all
channels zeroed). The threshold is the per-image quantile implied by rho,
with ties broken in row-major order so the mask cardinality is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fancl.errors import ConfigError, ShapeError
from fancl.tensorcore import Tensor, bilinear_resize, conv2d, no_record, sigmoid

PROBE_SOURCES = ("dedicated-probe", "branch-first-conv", "branch-first-batchnorm")


@dataclass
class ActivationProbe:
    weight: np.ndarray  # (3, 3, C, 1)
    bias: np.ndarray  # (1,)
    stride: int = 1
    source: str = "dedicated-probe"

    def __post_init__(self):
        if self.source not in PROBE_SOURCES:
            raise ConfigError(f"unknown probe source {self.source!r}; pick one of {PROBE_SOURCES}")
        self.weight = np.array(self.weight, copy=True)
        self.bias = np.array(self.bias, copy=True).reshape(1)
        if self.weight.ndim != 4 or self.weight.shape[3] != 1:
            raise ShapeError(f"probe weight must be (k, k, C, 1), got {list(self.weight.shape)}")


@dataclass
class FanaConfig:
    rho: float = 0.05
    source: str = "dedicated-probe"
    patch: int = 1

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"noise proportion rho must lie in [0, 1], got {self.rho}")
        if self.source not in PROBE_SOURCES:
            raise ConfigError(f"unknown probe source {self.source!r}")
        if self.patch < 1:
            raise ConfigError(f"patch size must be >= 1, got {self.patch}")


def dedicated_probe(in_channels: int, seed: int, dtype=np.float32) -> ActivationProbe:
    """Frozen random 3x3 probe, stride 1, uniform(+-sqrt(1/fan_in)) weights."""
    rng = np.random.default_rng(np.random.SeedSequence([seed % 2**64, 0xFA7A]))
    bound = np.sqrt(1.0 / (9 * in_channels))
    w = rng.uniform(-bound, bound, size=(3, 3, in_channels, 1)).astype(dtype)
    return ActivationProbe(w, np.zeros(1, dtype=dtype), stride=1)


def probe_from_branch(branch, source: str) -> ActivationProbe:
    """Snapshot a probe from the first stage of an encoder branch.

    The channel-mean of the first conv (optionally followed by its eval-mode
    batchnorm, which is per-channel affine) collapses into one 3x3 kernel.
    """
    w = branch.conv_w[0].data
    b = branch.conv_b[0].data
    if source == "branch-first-batchnorm":
        st = branch.bn_stats[0]
        gain = branch.bn_gamma[0].data / np.sqrt(st.var + 1e-5)
        shift = branch.bn_beta[0].data - st.mean * gain
        w = w * gain
        b = b * gain + shift
    elif source != "branch-first-conv":
        raise ConfigError(f"probe source {source!r} cannot be taken from a branch")
    return ActivationProbe(
        w.mean(axis=3, keepdims=True),
        np.array([b.mean()], dtype=w.dtype),
        stride=branch.config.stride,
        source=source,
    )


def activation_map(probe: ActivationProbe, image) -> np.ndarray:
    """Sigmoid probe response resized back to the image's (H, W)."""
    x = np.asarray(image.data if isinstance(image, Tensor) else image)
    if x.ndim != 3:
        raise ShapeError(f"activation_map expects an (H, W, C) image, got dims {list(x.shape)}")
    if x.shape[2] != probe.weight.shape[2]:
        raise ShapeError(f"image has {x.shape[2]} channels, probe expects {probe.weight.shape[2]}")
    return activation_maps(probe, x[None])[0]


def activation_maps(probe: ActivationProbe, images: np.ndarray) -> np.ndarray:
    """Batched :func:`activation_map` over (N, H, W, C)."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[3] != probe.weight.shape[2]:
        raise ShapeError(f"image batch dims {list(images.shape)} incompatible with probe {list(probe.weight.shape)}")
    k = probe.weight.shape[0]
    with no_record():
        dt = images.dtype if np.issubdtype(images.dtype, np.floating) else None
        x, w, b = (Tensor(a, dtype=dt) for a in (images, probe.weight, probe.bias))
        resp = sigmoid(conv2d(x, w, b, stride=probe.stride, pad=k // 2)).data[..., 0]
    h, wd = images.shape[1:3]
    if resp.shape[1:] == (h, wd):
        return resp
    return np.stack([bilinear_resize(r, (h, wd)) for r in resp])


def _box_mean(amap: np.ndarray, patch: int) -> np.ndarray:
    # same-size box filter used by patch mode
    lo = patch // 2
    hi = patch - 1 - lo
    padded = np.pad(amap, ((lo, hi), (lo, hi)), mode="edge")
    cs = padded.cumsum(0).cumsum(1)
    cs = np.pad(cs, ((1, 0), (1, 0)))
    h, w = amap.shape
    total = cs[patch : patch + h, patch : patch + w] - cs[:h, patch : patch + w] - cs[patch : patch + h, :w] + cs[:h, :w]
    return total / (patch * patch)


def noise_mask(amap: np.ndarray, rho: float, patch: int = 1) -> np.ndarray:
    """Binary (H, W) mask with exactly ``round(rho * H * W)`` ones.

    ``patch > 1`` ranks pixels by their box-averaged activation instead,
    which gives contiguous blocks while keeping the cardinality exact.
    """
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"noise proportion rho must lie in [0, 1], got {rho}")
    amap = np.asarray(amap)
    if amap.ndim != 2:
        raise ShapeError(f"noise_mask expects an (H, W) map, got dims {list(amap.shape)}")
    if not np.isfinite(amap).all():
        raise ConfigError("activation map contains non-finite values")
    score = _box_mean(amap.astype(np.float64), patch) if patch > 1 else amap
    h, w = amap.shape
    # literal left-to-right product; half-way counts use Python's round-half-even
    k = int(round(rho * h * w))
    mask = np.zeros(amap.size, dtype=np.uint8)
    if k:
        order = np.argsort(-score.reshape(-1), kind="stable")
        mask[order[:k]] = 1
    return mask.reshape(amap.shape)


def apply_pepper_noise(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero every channel of masked pixels; other pixels are untouched."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"mask dims {list(mask.shape)} do not match image dims {list(image.shape[:2])}")
    out = image.copy()
    out[mask.astype(bool)] = 0
    return out


def fana(probe: ActivationProbe, images: np.ndarray, config: FanaConfig):
    """Noised copies of an (N, H, W, C) batch plus their masks."""
    images = np.asarray(images)
    if config.rho == 0.0:
        return images.copy(), np.zeros(images.shape[:3], dtype=np.uint8)
    maps = activation_maps(probe, images)
    masks = np.stack([noise_mask(m, config.rho, config.patch) for m in maps])
    noised = images.copy()
    noised[masks.astype(bool)] = 0
    return noised, masks
