import numpy as np
import pytest

from fancl.encoder import EncoderConfig, FusionParams, forward_branch, forward_fusion, init_params, uniform_bound
from fancl.errors import ConfigError, ShapeError
from fancl.tensorcore import Tensor, grad_check, matmul, precision, tsum

SMALL = EncoderConfig(channels=(3, 4), embed_dim=5, height=8, width=8)


def batch(rng, n=4, cfg=SMALL, dtype=np.float32):
    return rng.random((n, cfg.height, cfg.width, cfg.in_channels)).astype(dtype)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = init_params(EncoderConfig(), 11), init_params(EncoderConfig(), 11)
        for pa, pb in zip(a[0].parameters() + a[1].parameters() + a[2].parameters(),
                          b[0].parameters() + b[1].parameters() + b[2].parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_different_seeds_differ(self):
        a, _, _ = init_params(EncoderConfig(), 1)
        b, _, _ = init_params(EncoderConfig(), 2)
        assert not np.array_equal(a.conv_w[0].data, b.conv_w[0].data)

    def test_branches_are_independent_substreams(self):
        theta, theta_n, _ = init_params(EncoderConfig(), 5)
        assert not np.array_equal(theta.conv_w[0].data, theta_n.conv_w[0].data)

    def test_bound_for_8_channel_3x3(self):
        assert uniform_bound(3 * 3 * 8) == pytest.approx(np.sqrt(1 / 72), abs=0)

    def test_weights_within_bound_biases_zero(self):
        theta, _, phi = init_params(EncoderConfig(), 3)
        c_in = 3
        for w, b, c in zip(theta.conv_w, theta.conv_b, EncoderConfig().channels):
            assert np.abs(w.data).max() <= uniform_bound(9 * c_in)
            assert not b.data.any()
            c_in = c
        assert phi.weight.shape == (128, 64) and phi.bias.shape == (64,)
        assert np.abs(phi.weight.data).max() <= uniform_bound(128)

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            EncoderConfig(embed_dim=1)
        with pytest.raises(ConfigError):
            EncoderConfig(channels=(8, 0))


class TestForward:
    @pytest.mark.parametrize("training", [False, True])
    def test_output_unit_rows(self, rng, training):
        theta, _, _ = init_params(EncoderConfig(), 0)
        out = forward_branch(theta, batch(rng, 6, EncoderConfig()), training=training)
        assert out.shape == (6, 64)
        assert np.all(np.abs(np.linalg.norm(out.data.astype(np.float64), axis=1) - 1) < 1e-6)

    def test_duplicate_rows_identical_in_eval(self, rng):
        theta, _, _ = init_params(SMALL, 0)
        x = batch(rng, 3)
        x[2] = x[0]
        out = forward_branch(theta, x, training=False).data
        assert np.array_equal(out[0], out[2])

    def test_extent_mismatch(self, rng):
        theta, _, _ = init_params(SMALL, 0)
        with pytest.raises(ShapeError):
            forward_branch(theta, rng.random((2, 9, 8, 3)))

    def test_gradcheck_through_branch(self, rng):
        theta, _, _ = init_params(SMALL, 4, dtype=np.float64)
        x = Tensor(batch(rng, 4, dtype=np.float64), dtype=np.float64)
        c = Tensor(rng.normal(size=(SMALL.embed_dim, 1)), dtype=np.float64)
        params = theta.parameters()

        def fn(*ps):
            return tsum(matmul(forward_branch(theta, x, training=True), c))

        with precision(np.float64):
            assert grad_check(fn, params, coords=12, rng=rng) < 1e-5

    def test_float64_init_stays_float64(self):
        theta, theta_n, phi = init_params(SMALL, 0, dtype=np.float64)
        for p in theta.parameters() + theta_n.parameters() + phi.parameters():
            assert p.data.dtype == np.float64

    def test_branch_independence(self, rng):
        theta, theta_n, _ = init_params(SMALL, 0)
        x = batch(rng)
        before = forward_branch(theta_n, x).data.copy()
        for p in theta.parameters():
            p.data = p.data + 0.5
        assert np.array_equal(forward_branch(theta_n, x).data, before)


class TestFusion:
    def test_selector_weights_return_f(self, rng):
        d = 6
        f = rng.normal(size=(3, d))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        fn = rng.normal(size=(3, d))
        w = np.vstack([np.eye(d), np.zeros((d, d))])
        phi = FusionParams(Tensor(w, dtype=np.float64), Tensor(np.zeros(d), dtype=np.float64))
        out = forward_fusion(phi, Tensor(f, dtype=np.float64), Tensor(fn, dtype=np.float64))
        np.testing.assert_allclose(out.data, f, atol=1e-15)

    def test_unit_rows_and_asymmetry(self, rng):
        _, _, phi = init_params(EncoderConfig(embed_dim=8), 2, dtype=np.float64)
        f, fn = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
        a = forward_fusion(phi, Tensor(f, dtype=np.float64), Tensor(fn, dtype=np.float64)).data
        b = forward_fusion(phi, Tensor(fn, dtype=np.float64), Tensor(f, dtype=np.float64)).data
        assert np.all(np.abs(np.linalg.norm(a, axis=1) - 1) < 1e-6)
        assert not np.allclose(a, b)

    def test_dim_mismatch(self):
        _, _, phi = init_params(EncoderConfig(embed_dim=4), 0)
        with pytest.raises(ShapeError):
            forward_fusion(phi, np.zeros((2, 4)), np.zeros((3, 4)))
