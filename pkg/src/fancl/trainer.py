"""Alternating clustering / contrastive training loop.

Each epoch regenerates the noised images, extracts features with both
branches, clusters the original-branch features with DBSCAN, seeds the
three memory banks from cluster means and then runs one pass of PK
mini-batches over the non-outlier pool.

Before clustering, batch-norm running statistics are reset to the exact
statistics of the un-augmented images (``TrainConfig.recalibrate_bn``), so
eval-mode features are not skewed by the padded crops seen in training.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fancl.clustering import OUTLIER, DbscanConfig, LabeledView, assign_pseudo_labels, cluster_purity, dbscan, pairwise_cosine_distance
from fancl.encoder import EncoderConfig, forward_branch, forward_fusion, init_params
from fancl.errors import ConfigError, ContractError, NumericError
from fancl.evalkit import evaluate
from fancl.fana import FanaConfig, dedicated_probe, fana, probe_from_branch
from fancl.losses import LossConfig, total_loss
from fancl.memory import SPACES, MemoryBank, MemoryConfig, init_banks, update_banks
from fancl.tensorcore import AdamState, Tape, adam_step, backward, grads_for, no_record
from fancl.toolkit.tensorfile import read_container, write_container

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 0.00035
    lr_decay: float = 0.1
    lr_step: int = 20
    batch_size: int = 64
    weight_decay: float = 0.0005
    seed: int = 0
    P: int = 16
    K: int = 4
    # reset BN running statistics from the un-augmented train set before
    # each clustering pass; False keeps the momentum-tracked statistics
    # (still calibrated once when nothing has been tracked yet)
    recalibrate_bn: bool = True

    def __post_init__(self):
        if self.P * self.K != self.batch_size:
            raise ConfigError(f"P*K ({self.P}*{self.K}) must equal batch size {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class AugmentConfig:
    height: int = 32
    width: int = 32
    flip_p: float = 0.5
    pad: int = 10

    def __post_init__(self):
        if self.pad < 0:
            raise ConfigError(f"pad must be >= 0, got {self.pad}")


@dataclass
class RunConfig:
    """Every knob of a training run, serializable to JSON."""

    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fana: FanaConfig = field(default_factory=FanaConfig)
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        built = {}
        for name, klass in {
            "train": TrainConfig, "augment": AugmentConfig, "encoder": EncoderConfig, "fana": FanaConfig,
            "dbscan": DbscanConfig, "memory": MemoryConfig, "loss": LossConfig,
        }.items():
            if name in kinds:
                built[name] = klass(**d.get(name, {}))
        return cls(**built)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``base * decay ** (epoch // step)``."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step)


def epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed % 2**64, epoch, stream]))


def pk_sample(labels, P: int, K: int, rng: np.random.Generator, pool=None) -> np.ndarray:
    """P distinct clusters x K members each (with replacement if short)."""
    labels = np.asarray(labels)
    pool = np.flatnonzero(labels != OUTLIER) if pool is None else np.asarray(pool)
    clusters = np.unique(labels[pool])
    if clusters.size == 0:
        raise ContractError("pk_sample: no clusters to sample from")
    if clusters.size < P:
        log.debug("only %d clusters available; lowering P from %d", clusters.size, P)
        P = clusters.size
    chosen = rng.choice(clusters, size=P, replace=False)
    batch = []
    for c in chosen:
        members = pool[labels[pool] == c]
        batch.append(rng.choice(members, size=K, replace=members.size < K))
    return np.concatenate(batch)


def augment_pair(x: np.ndarray, x_noised: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Flip / zero-pad / random-crop, with identical geometry for both images."""
    n, h, w, _ = x.shape
    p = cfg.pad
    flips = rng.random(n) < cfg.flip_p
    offs = rng.integers(0, 2 * p + 1, size=(n, 2))
    out = []
    for src in (x, x_noised):
        src = np.where(flips[:, None, None, None], src[:, :, ::-1], src)
        padded = np.pad(src, ((0, 0), (p, p), (p, p), (0, 0))) if p else src
        crops = np.stack([padded[i, oy : oy + h, ox : ox + w] for i, (oy, ox) in enumerate(offs)])
        out.append(np.ascontiguousarray(crops))
    return out[0], out[1]


class FanclModel:
    """Trainable state: both branches, fusion layer, probe and optimizer."""

    def __init__(self, config: RunConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        seed = config.train.seed
        self.theta, self.theta_n, self.phi = init_params(config.encoder, seed, dtype)
        self.probe = dedicated_probe(config.encoder.in_channels, seed, dtype)
        if config.fana.source != "dedicated-probe":
            self.probe = probe_from_branch(self.theta, config.fana.source)
        self.adam = AdamState.for_params(self.parameters(), weight_decay=config.train.weight_decay)
        self.epoch = 0
        self.banks = None  # banks of the most recent epoch, saved with checkpoints

    def parameters(self):
        return self.theta.parameters() + self.theta_n.parameters() + self.phi.parameters()

    def calibrate_bn(self, images: np.ndarray, noised: np.ndarray) -> None:
        """Set every running mean/var to exact statistics of the given set."""
        with no_record():
            for branch, x in ((self.theta, images), (self.theta_n, noised)):
                stats = branch.bn_stats + [branch.head_stats]
                saved = [s.momentum for s in stats]
                for s in stats:
                    s.momentum = 1.0
                forward_branch(branch, x.astype(self.dtype, copy=False), training=True)
                for s, m in zip(stats, saved):
                    s.momentum = m

    def extract(self, images: np.ndarray, noised: np.ndarray | None = None, chunk: int = 256):
        """Eval-mode features (f, f_noised, f_fused); noised part optional."""
        fs, fns, fhs = [], [], []
        with no_record():
            for s in range(0, len(images), chunk):
                f = forward_branch(self.theta, images[s : s + chunk].astype(self.dtype, copy=False), training=False)
                fs.append(f.data)
                if noised is not None:
                    fn = forward_branch(self.theta_n, noised[s : s + chunk].astype(self.dtype, copy=False), training=False)
                    fns.append(fn.data)
                    fhs.append(forward_fusion(self.phi, f, fn).data)
        if noised is None:
            return np.concatenate(fs), None, None
        return np.concatenate(fs), np.concatenate(fns), np.concatenate(fhs)

    # -- checkpoints --------------------------------------------------------

    def state_sections(self) -> dict[str, np.ndarray]:
        sec: dict[str, np.ndarray] = {}
        cfg_bytes = np.frombuffer(json.dumps(self.config.to_dict(), sort_keys=True).encode(), dtype=np.uint8)
        sec["meta.config_json"] = cfg_bytes.astype(np.int32)
        sec["meta.dtype"] = np.array([np.dtype(self.dtype).itemsize], dtype=np.int32)
        sec["meta.epoch"] = np.array([self.epoch], dtype=np.int32)
        seed = self.config.train.seed % 2**64
        sec["meta.seed"] = np.array([seed & 0xFFFFFFFF, seed >> 32], dtype=np.uint32).view(np.int32)
        for prefix, branch in (("theta", self.theta), ("theta_n", self.theta_n)):
            for name, arr in branch.named_tensors().items():
                sec[f"{prefix}.{name}"] = arr
            sec[f"{prefix}.bn_tracked"] = np.array(
                [s.tracked for s in branch.bn_stats] + [branch.head_stats.tracked], dtype=np.int32
            )
        sec["phi.weight"] = self.phi.weight.data
        sec["phi.bias"] = self.phi.bias.data
        sec["probe.weight"] = self.probe.weight
        sec["probe.bias"] = self.probe.bias
        sec["adam.step"] = np.array([self.adam.step], dtype=np.int32)
        for i, (m, v) in enumerate(zip(self.adam.m, self.adam.v)):
            sec[f"adam.m.{i}"] = m
            sec[f"adam.v.{i}"] = v
        return sec

    def save(self, path, banks=None) -> None:
        sec = self.state_sections()
        banks = self.banks if banks is None else banks
        if banks is not None:
            for bank in banks:
                sec[f"banks.{bank.space}"] = bank.entries
        try:
            write_container(path, sec)
        except OSError as exc:
            raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc

    @classmethod
    def load(cls, path) -> "FanclModel":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} does not exist")
        sec = read_container(path)
        cfg = RunConfig.from_dict(json.loads(sec["meta.config_json"].astype(np.uint8).tobytes().decode()))
        dtype = np.float64 if int(sec["meta.dtype"][0]) == 8 else np.float32
        model = cls(cfg, dtype)
        model.epoch = int(sec["meta.epoch"][0])
        for prefix, branch in (("theta", model.theta), ("theta_n", model.theta_n)):
            names = branch.named_tensors().keys()
            branch.load_named({n: sec[f"{prefix}.{n}"] for n in names})
            tracked = sec[f"{prefix}.bn_tracked"]
            for s, t in zip(branch.bn_stats, tracked[:-1]):
                s.tracked = int(t)
            branch.head_stats.tracked = int(tracked[-1])
        model.phi.weight.data = sec["phi.weight"]
        model.phi.bias.data = sec["phi.bias"]
        model.probe.weight = sec["probe.weight"]
        model.probe.bias = sec["probe.bias"]
        model.adam.step = int(sec["adam.step"][0])
        if all(f"banks.{sp}" in sec for sp in SPACES):
            model.banks = tuple(MemoryBank(sec[f"banks.{sp}"], sp) for sp in SPACES)
        model.adam.m = [sec[f"adam.m.{i}"] for i in range(len(model.adam.m))]
        model.adam.v = [sec[f"adam.v.{i}"] for i in range(len(model.adam.v))]
        return model


@dataclass
class EpochState:
    view: LabeledView
    banks: tuple
    noised: np.ndarray


def clustering_phase(model: FanclModel, images: np.ndarray, truth=None) -> tuple[EpochState | None, dict]:
    """Noise, extract, cluster and seed the banks for one epoch.

    Returns ``(None, info)`` when DBSCAN finds no cluster.
    """
    cfg = model.config
    if cfg.fana.source != "dedicated-probe":
        model.probe = probe_from_branch(model.theta, cfg.fana.source)
    noised, _ = fana(model.probe, images, cfg.fana)
    if cfg.train.recalibrate_bn or model.theta.head_stats.tracked == 0:
        model.calibrate_bn(images, noised)
    f, fn, fh = model.extract(images, noised)
    labeling = dbscan(pairwise_cosine_distance(f, tol=1e-4), cfg.dbscan)
    info = {"n_clusters": labeling.n_clusters, "n_outliers": labeling.n_outliers}
    if truth is not None and labeling.n_clusters:
        info["purity"] = cluster_purity(labeling, truth)
    if labeling.n_clusters == 0:
        log.warning("epoch %d: DBSCAN found no clusters; skipping", model.epoch)
        return None, info
    view = assign_pseudo_labels(labeling, f, fn, fh)
    banks = init_banks(f, fn, fh, view.labels, view.n_clusters)
    return EpochState(view, banks, noised), info


def train_iteration(model: FanclModel, state: EpochState, images: np.ndarray, idx: np.ndarray, lr: float, rng) -> dict:
    """One optimizer step on the batch ``idx`` followed by bank updates."""
    cfg = model.config
    labels = state.view.labels[idx]
    if np.any(labels == OUTLIER):
        raise ContractError("outliers cannot enter a training batch")
    x, xn = augment_pair(images[idx], state.noised[idx], cfg.augment, rng)
    with Tape() as tape:
        f = forward_branch(model.theta, x.astype(model.dtype, copy=False), training=True)
        fn = forward_branch(model.theta_n, xn.astype(model.dtype, copy=False), training=True)
        fh = forward_fusion(model.phi, f, fn)
        try:
            loss, parts = total_loss(f, fn, fh, state.banks, labels, cfg.loss)
        except NumericError as exc:
            raise NumericError(f"epoch {model.epoch}: {exc}") from exc
    params = model.parameters()
    grads = grads_for(tape, params, backward(tape, loss))
    adam_step(params, grads, model.adam, lr)
    update_banks(state.banks, labels, (f.data, fn.data, fh.data), cfg.memory.alpha)
    return parts


def run_epoch(model: FanclModel, images: np.ndarray, truth=None, metrics=None) -> dict:
    cfg = model.config
    epoch = model.epoch
    lr = lr_at(epoch, cfg.train)
    state, info = clustering_phase(model, images, truth)
    record = {"epoch": epoch, "event": "cluster", **info}
    if metrics is not None:
        metrics(record)
    if state is not None:
        model.banks = state.banks
        rng = epoch_rng(cfg.train.seed, epoch)
        pool = state.view.pool
        p_eff = min(cfg.train.P, state.view.n_clusters)
        if p_eff < cfg.train.P:
            log.warning("epoch %d: only %d clusters; lowering P from %d", epoch, p_eff, cfg.train.P)
        iters = math.ceil(pool.size / (p_eff * cfg.train.K))
        for it in range(iters):
            idx = pk_sample(state.view.labels, cfg.train.P, cfg.train.K, rng, pool=pool)
            parts = train_iteration(model, state, images, idx, lr, rng)
            if metrics is not None:
                metrics({"epoch": epoch, "iter": it, **parts, "lr": lr})
    model.epoch += 1
    return info


def run_training(
    config: RunConfig,
    images: np.ndarray,
    out_dir=None,
    truth=None,
    eval_fn=None,
    model: FanclModel | None = None,
    dtype=np.float32,
) -> tuple[FanclModel, list[dict]]:
    """Train for ``config.train.epochs`` epochs (resuming ``model`` if given).

    A resumed model keeps its checkpointed settings apart from the epoch
    target, which is taken from ``config``.

    With ``out_dir`` set, ``metrics.jsonl`` and per-epoch checkpoints
    (``epoch_XXX.ftck`` plus ``last.ftck``) are written there.
    ``eval_fn(model) -> dict`` is called after each epoch when provided.
    """
    if model is None:
        model = FanclModel(config, dtype)
    else:
        # a resumed model keeps its own config; only the epoch target moves
        theirs = dataclasses.replace(model.config.train, epochs=config.train.epochs)
        if dataclasses.replace(model.config, train=theirs) != config:
            log.warning("resume: config differs from the checkpoint; keeping the checkpoint's settings")
        model.config.train.epochs = config.train.epochs
    records: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    stream = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if model.epoch > 0 else "w"
        stream = open(out / "metrics.jsonl", mode)

    def emit(rec):
        records.append(rec)
        if stream is not None:
            stream.write(json.dumps(rec) + "\n")

    try:
        if out is not None and model.epoch == 0:
            model.save(out / "last.ftck")
        while model.epoch < config.train.epochs:
            run_epoch(model, images, truth, emit)
            if eval_fn is not None:
                emit({"epoch": model.epoch - 1, "event": "eval", **eval_fn(model)})
            if out is not None:
                model.save(out / f"epoch_{model.epoch:03d}.ftck")
                model.save(out / "last.ftck")
    finally:
        if stream is not None:
            stream.close()
    return model, records


def extract_space(model: FanclModel, images, space: str = "original") -> np.ndarray:
    """Eval-mode features of one space; noised/fused apply FANA first."""
    if space == "original":
        return model.extract(images)[0]
    if space not in ("noised", "fused"):
        raise ConfigError(f"unknown feature space {space!r}")
    noised, _ = fana(model.probe, images, model.config.fana)
    return model.extract(images, noised)[1 if space == "noised" else 2]


def evaluate_model(model: FanclModel, query, query_ids, gallery, gallery_ids, space: str = "original"):
    """Retrieval metrics using the chosen feature space (default: original branch)."""
    fq = extract_space(model, query, space)
    fg = extract_space(model, gallery, space)
    return evaluate(fq, query_ids, fg, gallery_ids)
