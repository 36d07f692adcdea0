"""Cluster contrastive, consistency and joint objectives.

All functions accept a single feature (D,) or a batch (B, D) as tensors
and return per-sample losses for batches. Memory-bank entries are plain
arrays and therefore constants on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fancl.errors import ConfigError, ContractError, NumericError
from fancl.tensorcore import Tensor, add, l2_normalize, logsumexp, matmul, mul, scale, tsum


@dataclass
class LossConfig:
    tau: float = 0.05
    cluster_consistency: bool = True
    instance_consistency: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature tau must be positive, got {self.tau}")


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 1:
        # broadcasting against a (1, D) zero row keeps the tape connected
        t = add(t, Tensor(np.zeros((1, t.data.shape[0]), dtype=t.data.dtype)))
    return t


def _check_nonzero(*tensors) -> None:
    for t in tensors:
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        if np.any(np.linalg.norm(data.reshape(-1, data.shape[-1]), axis=-1) == 0):
            raise NumericError("cosine similarity of a zero vector is undefined")


def cosine_sim(u, v) -> Tensor:
    """Row-wise cosine similarity along the last axis."""
    u = u if isinstance(u, Tensor) else Tensor(u)
    v = v if isinstance(v, Tensor) else Tensor(v)
    _check_nonzero(u, v)
    return tsum(mul(l2_normalize(u), l2_normalize(v)), axis=-1)


def cluster_loss(f_q, bank, labels, tau: float) -> Tensor:
    """Softmax cross-entropy of each query against every bank entry.

    ``bank`` is a (M, D) array (or MemoryBank); ``labels`` holds each
    query's positive cluster. Returns a (B,) tensor, or a scalar for a
    single (D,) query.
    """
    single = (f_q.data if isinstance(f_q, Tensor) else np.asarray(f_q)).ndim == 1
    q = _as_batch(f_q)
    entries = np.asarray(getattr(bank, "entries", bank))
    labels = np.atleast_1d(np.asarray(labels))
    m = entries.shape[0]
    if labels.shape[0] != q.data.shape[0]:
        raise ContractError(f"{labels.shape[0]} labels for {q.data.shape[0]} queries")
    if labels.min() < 0 or labels.max() >= m:
        raise ContractError(f"labels must lie in [0, {m})")
    _check_nonzero(q)
    sims = matmul(l2_normalize(q), Tensor(entries.T, dtype=q.data.dtype))
    logits = scale(sims, 1.0 / tau)
    onehot = np.zeros((labels.shape[0], m), dtype=q.data.dtype)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    positive = tsum(mul(logits, Tensor(onehot, dtype=q.data.dtype)), axis=1)
    loss = add(logsumexp(logits), scale(positive, -1.0))
    return tsum(loss) if single else loss


def consistency_loss(f_q, f_q_noised, m_pos_noised, config: LossConfig) -> Tensor:
    """``-[cluster] sim(f_q, m~+) - [instance] sim(f_q, f~_q)``, per sample."""
    terms = []
    if config.cluster_consistency:
        f_q = f_q if isinstance(f_q, Tensor) else Tensor(f_q)
        m_pos = np.asarray(getattr(m_pos_noised, "data", m_pos_noised))
        terms.append(cosine_sim(f_q, Tensor(m_pos, dtype=f_q.data.dtype)))
    if config.instance_consistency:
        terms.append(cosine_sim(f_q, f_q_noised))
    if not terms:
        shape = np.asarray(getattr(f_q, "data", f_q)).shape[:-1]
        return Tensor(np.zeros(shape, dtype=np.asarray(getattr(f_q, "data", f_q)).dtype))
    total = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
    return scale(total, -1.0)


def total_loss(f_q, f_q_noised, f_q_fused, banks, labels, config: LossConfig):
    """Batch mean of the three cluster losses plus the consistency loss.

    Returns ``(loss, parts)`` where ``parts`` carries float batch means of
    ``L_cluster-all``, ``L_consistency`` and ``L_total`` for logging.
    """
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size == 0:
        raise ContractError("total_loss needs a non-empty batch")
    bank, bank_noised, bank_fused = banks
    n = labels.shape[0]
    cl = add(
        add(cluster_loss(f_q, bank, labels, config.tau), cluster_loss(f_q_noised, bank_noised, labels, config.tau)),
        cluster_loss(f_q_fused, bank_fused, labels, config.tau),
    )
    m_pos = np.asarray(getattr(bank_noised, "entries", bank_noised))[labels]
    cons = consistency_loss(f_q, f_q_noised, m_pos, config)
    per_sample = add(cl, cons)
    loss = scale(tsum(per_sample), 1.0 / n)
    parts = {
        "L_cluster-all": float(cl.data.sum() / n),
        "L_consistency": float(cons.data.sum() / n),
        "L_total": float(loss.data),
    }
    for name, value in parts.items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss term {name}")
    return loss, parts
