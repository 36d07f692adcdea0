"""Synthetic identity images: each identity is a seeded composition of
coloured elliptical blobs; every image is a jittered render of it.

An identity fixes a background colour, a two-colour palette (a colour and
its complement) and a blob scale shared by all of its blobs, so identities
differ in colour statistics and texture scale, not only in blob layout.
Brightness jitter is a multiplicative gain ``1 + U(-b, b)``.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence([master_seed, identity])``, so identities are independent
substreams and output is reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fancl.errors import ConfigError
from fancl.toolkit.manifest import Record, write_manifest
from fancl.toolkit.tensorfile import write_tensor


@dataclass
class SyntheticConfig:
    n_identities: int = 10
    images_per_identity: int = 40
    height: int = 32
    width: int = 32
    channels: int = 3
    blobs: int = 6
    scale_range: tuple[float, float] = (1.0, 3.0)
    elongation: float = 2.0
    rotation_deg: float = 15.0
    translation_px: float = 3.0
    brightness: float = 0.1
    noise_sigma: float = 0.02
    split: tuple[float, float, float] = (0.6, 0.1, 0.3)

    def __post_init__(self):
        if self.n_identities < 1 or self.images_per_identity < 1:
            raise ConfigError("need at least one identity and one image per identity")
        if self.blobs < 1 or not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ConfigError("need at least one blob and a positive scale range")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {self.split}")


@dataclass
class BasePattern:
    background: np.ndarray  # (C,)
    centers: np.ndarray  # (B, 2) row, col
    axes: np.ndarray  # (B, 2) sigma along the blob's own axes
    angles: np.ndarray  # (B,)
    colors: np.ndarray  # (B, C)


def base_pattern(rng: np.random.Generator, cfg: SyntheticConfig) -> BasePattern:
    background = rng.uniform(0.0, 1.0, size=cfg.channels)
    color = rng.uniform(0.0, 1.0, size=cfg.channels)
    size = rng.uniform(*cfg.scale_range) * min(cfg.height, cfg.width) / 32.0
    margin = np.array([cfg.height, cfg.width]) / 16.0
    lo, hi = margin, np.array([cfg.height, cfg.width]) - margin
    jitter = rng.uniform(0.8, 1.25, size=(cfg.blobs, 1))
    axes = np.array([size * cfg.elongation, size]) * jitter
    pick = rng.random((cfg.blobs, 1)) < 0.5
    return BasePattern(
        background=background,
        centers=rng.uniform(lo, hi, size=(cfg.blobs, 2)),
        axes=axes,
        angles=rng.uniform(0.0, np.pi, size=cfg.blobs),
        colors=np.where(pick, color, 1.0 - color),
    )


def render(pattern: BasePattern, cfg: SyntheticConfig, angle=0.0, shift=(0.0, 0.0)) -> np.ndarray:
    """Evaluate the pattern after rotating by ``angle`` (radians) about the
    image centre and translating by ``shift`` pixels."""
    h, w = cfg.height, cfg.width
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    # pull each output pixel back into pattern coordinates
    py, px = rows - cy - shift[0], cols - cx - shift[1]
    c, s = np.cos(-angle), np.sin(-angle)
    qy, qx = c * py - s * px + cy, s * py + c * px + cx
    img = np.broadcast_to(pattern.background, (h, w, cfg.channels)).copy()
    for (by, bx), (sa, sb), theta, color in zip(pattern.centers, pattern.axes, pattern.angles, pattern.colors):
        dy, dx = qy - by, qx - bx
        ct, st = np.cos(theta), np.sin(theta)
        u, v = ct * dy + st * dx, -st * dy + ct * dx
        a = np.exp(-0.5 * ((u / sa) ** 2 + (v / sb) ** 2))[..., None]
        img = img * (1 - a) + color * a
    return img


def render_identity(identity: int, seed: int, cfg: SyntheticConfig):
    """Base pattern plus all jittered images (float32) of one identity."""
    rng = np.random.default_rng(np.random.SeedSequence([seed % 2**64, identity]))
    pattern = base_pattern(rng, cfg)
    images = []
    for _ in range(cfg.images_per_identity):
        angle = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        shift = rng.uniform(-cfg.translation_px, cfg.translation_px, size=2)
        img = render(pattern, cfg, angle, shift)
        img = img * (1.0 + rng.uniform(-cfg.brightness, cfg.brightness))
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return pattern, images


def split_counts(n: int, split) -> tuple[int, int, int]:
    n_train = int(round(split[0] * n))
    n_query = int(round(split[1] * n))
    return n_train, n_query, n - n_train - n_query


def generate_synthetic(cfg: SyntheticConfig, out_dir, seed: int = 0) -> list[Record]:
    """Write every image as an FTNS file plus ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    n_train, n_query, _ = split_counts(cfg.images_per_identity, cfg.split)
    records = []
    for ident in range(cfg.n_identities):
        _, images = render_identity(ident, seed, cfg)
        name = f"id{ident:03d}"
        for j, img in enumerate(images):
            split = "train" if j < n_train else "query" if j < n_train + n_query else "gallery"
            rel = f"images/{name}_{j:03d}.ftns"
            try:
                write_tensor(out / rel, img)
            except OSError as exc:
                raise OSError(f"cannot write {out / rel}: {exc.strerror}") from exc
            records.append(Record(name, rel, split))
    write_manifest(out / "manifest.jsonl", records)
    return records
