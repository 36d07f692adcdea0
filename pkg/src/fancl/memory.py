"""Cluster-feature memory banks with mean init and momentum updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fancl.errors import ConfigError, ContractError

SPACES = ("original", "noised", "fused")


@dataclass
class MemoryConfig:
    alpha: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"momentum alpha must lie in [0, 1], got {self.alpha}")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


class MemoryBank:
    """One unit-norm feature per cluster for a single feature space.

    Entries are plain arrays: the losses read them as constants, so no
    gradient ever reaches the bank.
    """

    def __init__(self, entries: np.ndarray, space: str = "original"):
        if space not in SPACES:
            raise ConfigError(f"unknown feature space {space!r}")
        self.entries = np.array(entries, copy=True)
        self.space = space

    def __len__(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def from_features(cls, features: np.ndarray, labels: np.ndarray, n_clusters: int, space: str = "original"):
        if n_clusters < 1:
            raise ContractError("cannot build a memory bank with zero clusters")
        features = np.asarray(features)
        labels = np.asarray(labels)
        entries = np.empty((n_clusters, features.shape[1]), dtype=features.dtype)
        for c in range(n_clusters):
            members = features[labels == c]
            if len(members) == 0:
                raise ContractError(f"cluster {c} has no members")
            # a singleton is already unit norm; keep it bit-exact
            entries[c] = members[0] if len(members) == 1 else _normalize_rows(members.mean(axis=0))
        return cls(entries, space)

    def positive(self, label: int) -> np.ndarray:
        if not 0 <= label < len(self):
            raise ContractError(f"cluster id {label} out of range for a bank of {len(self)} entries")
        return self.entries[label].copy()

    def update(self, label: int, query: np.ndarray, alpha: float) -> None:
        """``m <- normalize(alpha * m + (1 - alpha) * query)`` for one entry."""
        if not 0 <= label < len(self):
            raise ContractError(f"cannot update bank with cluster id {label} (bank has {len(self)} entries)")
        m = self.entries[label]
        if alpha == 1.0:
            return
        query = np.asarray(query, dtype=m.dtype)
        if alpha == 0.0:
            self.entries[label] = query
            return
        self.entries[label] = _normalize_rows(alpha * m + (1 - alpha) * query)


def init_banks(f, f_noised, f_fused, labels, n_clusters: int):
    """Three banks (original, noised, fused) seeded with normalized cluster means."""
    return (
        MemoryBank.from_features(f, labels, n_clusters, "original"),
        MemoryBank.from_features(f_noised, labels, n_clusters, "noised"),
        MemoryBank.from_features(f_fused, labels, n_clusters, "fused"),
    )


def momentum_update(bank: MemoryBank, label: int, query: np.ndarray, alpha: float) -> MemoryBank:
    bank.update(label, query, alpha)
    return bank


def positive_lookup(bank: MemoryBank, label: int) -> np.ndarray:
    return bank.positive(label)


def update_banks(banks, labels, queries, alpha: float) -> None:
    """Sequential per-query updates in batch order, one bank per space."""
    for bank, feats in zip(banks, queries):
        for lab, q in zip(labels, feats):
            bank.update(int(lab), q, alpha)
