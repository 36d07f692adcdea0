import json
import logging

import numpy as np
import pytest

from fancl.clustering import DbscanConfig, PseudoLabeling, assign_pseudo_labels
from fancl.encoder import EncoderConfig, forward_branch, forward_fusion
from fancl.errors import ConfigError, ContractError
from fancl.fana import FanaConfig
from fancl.losses import total_loss
from fancl.memory import MemoryConfig, init_banks
from fancl.tensorcore import Tape, adam_step, backward, grads_for, no_record
from fancl.toolkit.synthetic import SyntheticConfig, render_identity
from fancl.toolkit.tensorfile import read_container
from fancl.trainer import (
    AugmentConfig,
    EpochState,
    FanclModel,
    RunConfig,
    TrainConfig,
    augment_pair,
    clustering_phase,
    epoch_rng,
    extract_space,
    lr_at,
    pk_sample,
    run_training,
    train_iteration,
)


def identities(n_ids, per, size=32, seed=0):
    cfg = SyntheticConfig(n_identities=n_ids, images_per_identity=per, height=size, width=size)
    imgs, truth = [], []
    for i in range(n_ids):
        imgs += render_identity(i, seed, cfg)[1]
        truth += [i] * per
    return np.stack(imgs), np.array(truth)


def small_config(seed=0, epochs=2, **over):
    parts = dict(
        train=TrainConfig(epochs=epochs, seed=seed, P=2, K=4, batch_size=8),
        augment=AugmentConfig(height=16, width=16, pad=2),
        encoder=EncoderConfig(channels=(8, 16), embed_dim=16, height=16, width=16),
    )
    parts.update(over)
    return RunConfig(**parts)


@pytest.fixture(scope="module")
def small_data():
    return identities(3, 8, size=16)


def truth_state(model, images, truth):
    """Epoch state with ground-truth labels standing in for DBSCAN."""
    noised = images.copy()
    f, fn, fh = model.extract(images, noised)
    view = assign_pseudo_labels(PseudoLabeling(truth.astype(np.int64)), f, fn, fh)
    return EpochState(view, init_banks(f, fn, fh, view.labels, view.n_clusters), noised)


def snapshot(model):
    return [p.data.copy() for p in model.parameters()]


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 0.00035), (19, 0.00035), (20, 0.000035), (59, 0.0000035)])
    def test_step_decay(self, epoch, lr):
        assert lr_at(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)

    def test_negative_epoch(self):
        with pytest.raises(ConfigError):
            lr_at(-1, TrainConfig())

    def test_batch_invariant(self):
        with pytest.raises(ConfigError):
            TrainConfig(P=16, K=4, batch_size=60)


class TestPkSample:
    def test_exhaustive_draw(self, rng):
        labels = np.repeat(np.arange(4), 6)
        idx = pk_sample(labels, 4, 4, rng)
        counts = np.bincount(labels[idx], minlength=4)
        assert counts.tolist() == [4, 4, 4, 4]
        assert all(len(set(idx[labels[idx] == c])) == 4 for c in range(4))

    def test_singleton_repeated(self, rng):
        labels = np.array([0, 1, 1, 1, 1])
        idx = pk_sample(labels, 2, 4, rng)
        assert sorted(idx[labels[idx] == 0].tolist()) == [0, 0, 0, 0]

    def test_histogram_shape(self, rng):
        labels = rng.integers(0, 10, 300)
        idx = pk_sample(labels, 5, 3, rng)
        counts = np.bincount(labels[idx])
        assert sorted(counts[counts > 0].tolist()) == [3] * 5

    def test_p_lowered_to_m(self, rng):
        labels = np.array([0, 0, 1, 1, -1])
        idx = pk_sample(labels, 16, 2, rng)
        assert idx.size == 4 and 4 not in idx

    def test_no_clusters(self, rng):
        with pytest.raises(ContractError):
            pk_sample(np.full(3, -1), 2, 2, rng)

    def test_epoch_rng_streams(self):
        a = epoch_rng(3, 1).random(4)
        assert np.array_equal(a, epoch_rng(3, 1).random(4))
        assert not np.array_equal(a, epoch_rng(3, 2).random(4))
        assert not np.array_equal(a, epoch_rng(3, 1, stream=1).random(4))


class TestAugment:
    def test_pair_shares_geometry(self, rng):
        x = rng.random((6, 16, 16, 3)).astype(np.float32)
        xn = x.copy()
        xn[:, 4:8, 4:8] = 0
        cfg = AugmentConfig(height=16, width=16, pad=3)
        a, b = augment_pair(x, xn, cfg, np.random.default_rng(1))
        b2, a2 = augment_pair(xn, x, cfg, np.random.default_rng(1))
        assert a.shape == b.shape == x.shape
        assert np.array_equal(a, a2) and np.array_equal(b, b2)
        same, _ = augment_pair(x, x, cfg, np.random.default_rng(1))
        assert np.array_equal(same, a)
        # the pair only differs where the zeroed block landed
        assert np.all(b[a != b] == 0)

    def test_no_pad_no_flip_is_identity(self, rng):
        x = rng.random((3, 8, 8, 3))
        a, b = augment_pair(x, x, AugmentConfig(height=8, width=8, pad=0, flip_p=0.0), rng)
        assert np.array_equal(a, x) and np.array_equal(b, x)

    def test_bad_pad(self):
        with pytest.raises(ConfigError):
            AugmentConfig(pad=-1)


class TestClusteringPhase:
    def test_two_identities(self):
        images, truth = identities(2, 24)
        state, info = clustering_phase(FanclModel(RunConfig()), images, truth)
        assert info["n_clusters"] == 2 and info["purity"] == 1.0
        assert [len(b) for b in state.banks] == [2, 2, 2]

    def test_rho_zero_keeps_images(self, small_data):
        images, _ = small_data
        cfg = small_config(fana=FanaConfig(rho=0.0), dbscan=DbscanConfig(eps=2.0))
        state, _ = clustering_phase(FanclModel(cfg), images)
        assert np.array_equal(state.noised, images)

    def test_repeatable(self, small_data):
        images, _ = small_data
        a, _ = clustering_phase(FanclModel(small_config()), images)
        b, _ = clustering_phase(FanclModel(small_config()), images)
        assert np.array_equal(a.view.labels, b.view.labels)


class TestIteration:
    def test_zero_lr_params_fixed_banks_move(self, small_data):
        images, truth = small_data
        model = FanclModel(small_config())
        state = truth_state(model, images, truth)
        before = snapshot(model)
        bank0 = state.banks[0].entries.copy()
        train_iteration(model, state, images, np.arange(8), 0.0, np.random.default_rng(0))
        assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))
        assert not np.array_equal(bank0, state.banks[0].entries)

    def test_alpha_one_banks_fixed_params_move(self, small_data):
        images, truth = small_data
        model = FanclModel(small_config(memory=MemoryConfig(alpha=1.0)))
        state = truth_state(model, images, truth)
        before = snapshot(model)
        banks = [b.entries.copy() for b in state.banks]
        train_iteration(model, state, images, np.arange(8), 1e-3, np.random.default_rng(0))
        assert all(np.array_equal(a, b.entries) for a, b in zip(banks, state.banks))
        assert any(not np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))

    def test_outlier_in_batch(self, small_data):
        images, truth = small_data
        model = FanclModel(small_config())
        state = truth_state(model, images, truth)
        state.view.labels[0] = -1
        with pytest.raises(ContractError):
            train_iteration(model, state, images, np.arange(4), 1e-3, np.random.default_rng(0))

    def test_descent_small_lr(self, small_data):
        images, truth = small_data
        drops = []
        for seed in range(5):
            model = FanclModel(small_config(seed=seed), dtype=np.float64)
            state = truth_state(model, images.astype(np.float64), truth)
            idx = pk_sample(state.view.labels, 2, 4, np.random.default_rng(seed))
            x, xn = augment_pair(images[idx].astype(np.float64), state.noised[idx], model.config.augment,
                                 np.random.default_rng(seed))

            def objective():
                with Tape() as tape:
                    f = forward_branch(model.theta, x, training=True)
                    fn = forward_branch(model.theta_n, xn, training=True)
                    loss, _ = total_loss(f, fn, forward_fusion(model.phi, f, fn), state.banks,
                                         state.view.labels[idx], model.config.loss)
                return tape, loss

            tape, loss = objective()
            params = model.parameters()
            adam_step(params, grads_for(tape, params, backward(tape, loss)), model.adam, 1e-4)
            with no_record():
                _, after = objective()
            drops.append(float(loss.data) - float(after.data))
        assert np.mean(drops) > 0 and all(d > 0 for d in drops)


class TestRunTraining:
    def test_zero_epochs_is_init(self, small_data, tmp_path):
        images, _ = small_data
        cfg = small_config(epochs=0)
        run_training(cfg, images, out_dir=tmp_path)
        saved = read_container(tmp_path / "last.ftck")
        fresh = FanclModel(cfg).state_sections()
        assert saved.keys() == fresh.keys()
        assert all(np.array_equal(saved[k], fresh[k]) for k in fresh)

    def test_deterministic(self, small_data, tmp_path):
        images, _ = small_data
        for name in ("a", "b"):
            run_training(small_config(), images, out_dir=tmp_path / name)
        for f in ("metrics.jsonl", "last.ftck", "epoch_001.ftck"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        recs = [json.loads(line) for line in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
        assert any("iter" in r for r in recs)

    def test_resume_matches_uninterrupted(self, small_data, tmp_path):
        images, _ = small_data
        full, full_recs = run_training(small_config(epochs=2), images, out_dir=tmp_path / "full")
        run_training(small_config(epochs=1), images, out_dir=tmp_path / "part")
        model = FanclModel.load(tmp_path / "part" / "last.ftck")
        assert model.epoch == 1
        run_training(small_config(epochs=2), images, out_dir=tmp_path / "part", model=model)
        assert (tmp_path / "full" / "last.ftck").read_bytes() == (tmp_path / "part" / "last.ftck").read_bytes()
        assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == (tmp_path / "part" / "metrics.jsonl").read_bytes()

    def test_zero_clusters_skip_epoch(self, small_data, caplog):
        images, _ = small_data
        cfg = small_config(epochs=2, dbscan=DbscanConfig(eps=1e-9, min_pts=2))
        init = FanclModel(cfg)
        with caplog.at_level(logging.WARNING):
            model, recs = run_training(cfg, images)
        assert model.epoch == 2
        assert [r["n_clusters"] for r in recs] == [0, 0]
        assert not any("iter" in r for r in recs)
        assert all(np.array_equal(a.data, b.data) for a, b in zip(init.parameters(), model.parameters()))
        assert "no clusters" in caplog.text

    def test_probe_receives_no_update(self, small_data):
        images, _ = small_data
        cfg = small_config()
        init = FanclModel(cfg)
        model, recs = run_training(cfg, images)
        assert any("iter" in r for r in recs)
        assert np.array_equal(init.probe.weight, model.probe.weight)
        assert np.array_equal(init.probe.bias, model.probe.bias)

    def test_banks_saved_in_checkpoint(self, small_data, tmp_path):
        images, _ = small_data
        model, _ = run_training(small_config(epochs=1), images, out_dir=tmp_path)
        loaded = FanclModel.load(tmp_path / "last.ftck")
        assert loaded.banks is not None
        for a, b in zip(model.banks, loaded.banks):
            assert a.space == b.space and np.array_equal(a.entries, b.entries)

    def test_extract_space(self, small_data):
        images, _ = small_data
        model = FanclModel(small_config())
        for space in ("original", "noised", "fused"):
            f = extract_space(model, images, space)
            assert f.shape == (len(images), 16)
        with pytest.raises(ConfigError):
            extract_space(model, images, "thermal")
