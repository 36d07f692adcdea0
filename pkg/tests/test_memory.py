import numpy as np
import pytest

from fancl.errors import ConfigError, ContractError
from fancl.memory import MemoryBank, MemoryConfig, init_banks, momentum_update, positive_lookup, update_banks
from oracles import unit_rows


class TestInit:
    def test_mean_of_two(self):
        bank = MemoryBank.from_features(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 0]), 1)
        np.testing.assert_allclose(bank.entries[0], [0.70710678, 0.70710678], atol=1e-8)

    def test_singleton_exact(self, rng):
        f = unit_rows(rng, 3, 5)
        bank = MemoryBank.from_features(f, np.array([1, 0, 0]), 2)
        assert np.array_equal(positive_lookup(bank, 1), f[0])

    def test_three_banks_same_size(self, rng):
        f = unit_rows(rng, 6, 4)
        labels = np.array([0, 1, 2, 0, 1, 2])
        banks = init_banks(f, -f, f[::-1].copy(), labels, 3)
        assert [len(b) for b in banks] == [3, 3, 3]
        assert [b.space for b in banks] == ["original", "noised", "fused"]
        np.testing.assert_allclose(banks[1].entries, -banks[0].entries)

    def test_empty_cluster(self, rng):
        with pytest.raises(ContractError):
            MemoryBank.from_features(unit_rows(rng, 2, 3), np.array([0, 0]), 2)

    def test_zero_clusters(self, rng):
        with pytest.raises(ContractError):
            MemoryBank.from_features(unit_rows(rng, 2, 3), np.array([-1, -1]), 0)

    def test_unknown_space(self):
        with pytest.raises(ConfigError):
            MemoryBank(np.eye(2), space="thermal")


class TestUpdate:
    def test_worked_blend(self):
        bank = MemoryBank(np.array([[1.0, 0.0]]))
        momentum_update(bank, 0, np.array([0.0, 1.0]), 0.1)
        np.testing.assert_allclose(bank.entries[0], [0.11043153, 0.99388373], atol=1e-8)
        assert np.linalg.norm([0.1, 0.9]) == pytest.approx(np.sqrt(0.82))

    def test_alpha_one_unchanged(self, rng):
        entries = unit_rows(rng, 3, 4)
        bank = MemoryBank(entries)
        bank.update(1, unit_rows(rng, 1, 4)[0], 1.0)
        assert np.array_equal(bank.entries, entries)

    def test_alpha_zero_replaces(self, rng):
        bank = MemoryBank(unit_rows(rng, 3, 4))
        q = unit_rows(rng, 1, 4)[0]
        bank.update(2, q, 0.0)
        assert np.array_equal(bank.entries[2], q)

    def test_only_target_entry_changes(self, rng):
        entries = unit_rows(rng, 4, 6)
        bank = MemoryBank(entries)
        bank.update(2, unit_rows(rng, 1, 6)[0], 0.3)
        changed = np.any(bank.entries != entries, axis=1)
        assert changed.tolist() == [False, False, True, False]

    @pytest.mark.parametrize("label", [-1, 3])
    def test_invalid_label(self, rng, label):
        bank = MemoryBank(unit_rows(rng, 3, 2))
        with pytest.raises(ContractError):
            bank.update(label, np.array([1.0, 0.0]), 0.1)
        with pytest.raises(ContractError):
            bank.positive(label)

    def test_alpha_range(self):
        MemoryConfig(0.0), MemoryConfig(1.0)
        with pytest.raises(ConfigError):
            MemoryConfig(1.1)

    def test_unit_norm_after_many_updates(self, rng):
        bank = MemoryBank(unit_rows(rng, 5, 8))
        queries = unit_rows(rng, 2000, 8)
        for q, lab, a in zip(queries, rng.integers(0, 5, 2000), rng.random(2000)):
            bank.update(int(lab), q, float(a))
        assert np.max(np.abs(np.linalg.norm(bank.entries, axis=1) - 1)) < 1e-6

    def test_sequential_batch_order(self, rng):
        banks = [MemoryBank(unit_rows(rng, 2, 3), s) for s in ("original", "noised", "fused")]
        expected = [b.entries.copy() for b in banks]
        labels = [0, 0, 1]
        queries = [unit_rows(rng, 3, 3) for _ in range(3)]
        for e, qs in zip(expected, queries):
            for lab, q in zip(labels, qs):
                blend = 0.1 * e[lab] + 0.9 * q
                e[lab] = blend / np.linalg.norm(blend)
        update_banks(banks, labels, queries, 0.1)
        for b, e in zip(banks, expected):
            np.testing.assert_allclose(b.entries, e, atol=1e-15)


class TestLookup:
    def test_reads_are_pure(self, rng):
        bank = MemoryBank(unit_rows(rng, 3, 4))
        a = bank.positive(1)
        a[:] = 0
        assert np.array_equal(bank.positive(1), bank.entries[1]) and bank.entries[1].any()

    def test_reflects_single_update(self, rng):
        bank = MemoryBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
        bank.update(0, np.array([0.0, 1.0]), 0.1)
        np.testing.assert_allclose(bank.positive(0), [0.11043153, 0.99388373], atol=1e-8)
        assert np.array_equal(bank.positive(1), [0.0, 1.0])
