import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from ridl.errors import InsufficientEntriesError, ShapeMismatchError
from ridl.losses import (
    LOG_FIELDS, FeatureBank, LossWeights, alpha_schedule, bank_push, bank_stats, bce_loss,
    decorr_grad, decorr_loss, read_training_log, recency_weights, recon_loss, total_loss,
    weighted_correlation, write_training_log,
)


def random_bank(seed, n=None, dz=None, dr=None, decay=None, batch=1):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 26)) if n is None else n
    dz = int(rng.integers(1, 9)) if dz is None else dz
    dr = int(rng.integers(1, 9)) if dr is None else dr
    decay = float(rng.uniform(0.5, 0.99)) if decay is None else decay
    bank = FeatureBank(25, decay, min(batch, n), 0)
    for _ in range(n):
        bank.push(rng.standard_normal(dz) * rng.uniform(0.1, 5, dz), rng.standard_normal(dr) + rng.uniform(-3, 3, dr))
    return bank


class TestBank:
    def test_capacity(self):
        bank = FeatureBank(capacity=25)
        for i in range(26):
            bank_push(bank, [float(i)], [0.0])
        assert len(bank) == 25
        Z, _ = bank.arrays()
        assert 0.0 not in Z[:, 0] and Z[0, 0] == 25.0

    def test_first_push(self):
        assert len(bank_push(FeatureBank(), [1.0, 2.0], [3.0])) == 1

    def test_dim_mismatch(self):
        bank = bank_push(FeatureBank(), [1.0, 2.0], [3.0])
        with pytest.raises(ShapeMismatchError):
            bank_push(bank, [1.0], [3.0])

    def test_invalid_config(self):
        for kwargs in ({"capacity": 0}, {"decay": 1.0}, {"batch_size": 30}, {"warm_up": -1}):
            with pytest.raises(ValueError):
                FeatureBank(**kwargs)

    def test_weights(self):
        np.testing.assert_allclose(recency_weights(3, 0.5), np.array([0.5, 0.25, 0.125]) / 0.875)


class TestCorrelation:
    def test_constant_r(self):
        bank = FeatureBank(decay=0.8)
        for z in (1.0, 2.0, 5.0):
            bank.push([z], [4.0])
        assert np.all(weighted_correlation(bank) == 0.0)
        assert decorr_loss(bank) == 0.0
        assert np.all(decorr_grad(bank) == 0.0)

    def test_scalar_example(self):
        bank = FeatureBank(decay=0.5)
        bank.push([1.0], [-1.0])  # older
        bank.push([1.0], [1.0])  # newest
        S = weighted_correlation(bank, standardize=False)
        assert S[0, 0] == pytest.approx(1 / 3, abs=1e-15)

    def test_scalar_example_loss(self):
        bank = FeatureBank(decay=0.5)
        bank.push([1.0], [-1.0])
        bank.push([1.0], [1.0])
        stats = bank_stats(bank)
        unit = type(stats)(stats.weights, np.zeros(1), np.ones(1), np.ones(1, bool),
                           np.zeros(1), np.ones(1), np.ones(1, bool))
        assert decorr_loss(bank, unit) == pytest.approx(1 / 3, abs=1e-15)

    @pytest.mark.parametrize("seed", range(100))
    def test_brute_force(self, seed):
        bank = random_bank(seed)
        Z, R = bank.arrays()
        ref = oracles.brute_correlation(Z, R, bank.decay)
        S = weighted_correlation(bank)
        np.testing.assert_allclose(S, ref, rtol=0, atol=1e-10)
        assert abs(decorr_loss(bank) - np.abs(ref).sum()) <= 1e-10

    def test_insufficient(self):
        bank = FeatureBank().push([1.0], [1.0])
        with pytest.raises(InsufficientEntriesError):
            weighted_correlation(bank)

    @given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5))
    @settings(max_examples=50, deadline=None)
    def test_affine_invariance(self, seed, scale, shift):
        bank = random_bank(seed)
        Z, R = bank.arrays()
        moved = FeatureBank(25, bank.decay, 1, 0)
        for z, r in zip(Z[::-1], R[::-1]):
            moved.push(scale * z + shift, r)
        np.testing.assert_allclose(weighted_correlation(moved), weighted_correlation(bank), atol=1e-9)

    def test_loss_nonnegative_and_zero_iff_s_zero(self):
        for seed in range(20):
            bank = random_bank(seed)
            assert decorr_loss(bank) >= 0
            assert (decorr_loss(bank) == 0) == (not weighted_correlation(bank).any())


class TestWarmUp:
    def test_inactive(self):
        bank = FeatureBank(warm_up=5)
        rng = np.random.default_rng(0)
        for _ in range(5):
            bank.push(rng.standard_normal(2), rng.standard_normal(2))
        assert not bank.active and decorr_loss(bank) == 0.0
        assert not decorr_grad(bank).any()
        bank.push(rng.standard_normal(2), rng.standard_normal(2))
        assert bank.active and decorr_loss(bank) > 0


class TestGradient:
    @pytest.mark.parametrize("seed", range(100))
    def test_finite_differences(self, seed):
        bank = random_bank(seed, batch=1 + seed % 3)
        stats = bank_stats(bank)
        grad = decorr_grad(bank, stats)
        Z, _ = bank.arrays()
        num = np.zeros_like(grad)
        h = 1e-5
        for b in range(grad.shape[0]):
            for k in range(grad.shape[1]):
                up, down = Z[: grad.shape[0]].copy(), Z[: grad.shape[0]].copy()
                up[b, k] += h
                down[b, k] -= h
                num[b, k] = (decorr_loss(bank.with_newest(up), stats)
                             - decorr_loss(bank.with_newest(down), stats)) / (2 * h)
        scale = max(np.abs(grad).max(), np.abs(num).max(), 1e-8)
        assert np.abs(grad - num).max() / scale < 1e-4

    def test_older_entries_get_no_gradient(self):
        bank = random_bank(3, n=10, batch=2)
        assert decorr_grad(bank).shape == (2, bank.z_dim)

    def test_zero_s_zero_gradient(self):
        bank = FeatureBank(decay=0.9)
        for z, r in (([1.0], [1.0]), ([-1.0], [1.0]), ([1.0], [-1.0]), ([-1.0], [-1.0])):
            bank.push(z, r)
        stats = bank_stats(bank)
        if np.all(weighted_correlation(bank, stats) == 0):
            assert not decorr_grad(bank, stats).any()
        bank = FeatureBank(decay=0.9)
        for z in (1.0, 2.0, 3.0):
            bank.push([z], [7.0])
        assert not decorr_grad(bank).any()


class TestBce:
    def test_examples(self):
        assert bce_loss([0.5], [1]) == pytest.approx(math.log(2), abs=1e-15)
        assert bce_loss([0.5, 0.5], [0, 1]) == pytest.approx(math.log(2), abs=1e-15)
        assert bce_loss([1.0, 0.0], [1, 0]) <= 1e-6

    def test_empty(self):
        with pytest.raises(ValueError):
            bce_loss([], [])

    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, pairs):
        p, y = zip(*pairs)
        assert bce_loss(p, y) >= 0


class TestRecon:
    def _target(self):
        c = np.linspace(-1, 1, 16).reshape(2, 2, 4)
        b = np.zeros((2, 2, 4))
        b.ravel()[::2] = 1
        return c, b

    def test_perfect(self):
        c, b = self._target()
        assert recon_loss(c, b, [(c, b)] * 4, 0.33) == pytest.approx(0, abs=1e-5)

    def test_constant_offsets(self):
        c, b = self._target()
        out = [(c + 0.1, np.full_like(b, 0.5))] * 4
        per = 0.1 + math.log(2)
        assert recon_loss(c, b, out, 0.2) == pytest.approx(per * (1 + 3 * 0.2), rel=1e-12)
        assert recon_loss(c, b, out, 0.0) == pytest.approx(per, rel=1e-12)

    def test_shape_mismatch(self):
        c, b = self._target()
        with pytest.raises(ShapeMismatchError):
            recon_loss(c, b, [(c[:1], b)] * 4, 0.3)


class TestScheduleAndTotal:
    def test_schedule_exact(self):
        assert (alpha_schedule(0), alpha_schedule(10), alpha_schedule(25)) == (0.33, 0.264, 0.2112)

    def test_schedule_non_increasing(self):
        vals = [alpha_schedule(e) for e in range(100)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_total(self):
        assert total_loss(1.0, 0.1, 0.5, LossWeights(w_corr=2)) == 1.7
        assert total_loss(0.4, 9.0, 0.25, LossWeights(w_corr=0)) == 0.65
        assert total_loss(0.0, 0.0, 0.0) == 0.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            total_loss(float("nan"), 0, 0)
        with pytest.raises(ValueError):
            LossWeights(alpha=0.5)
        with pytest.raises(ValueError):
            LossWeights(w_corr=-1)


def test_training_log_roundtrip(tmp_path):
    rows = [{"epoch": 0, "l_cls": 0.7, "l_corr": 0.1, "l_rec": 0.0, "total": 0.9, "max_abs_s": 0.4}]
    path = write_training_log(rows, tmp_path / "log.tsv")
    assert path.read_text().splitlines()[0].split("\t") == list(LOG_FIELDS)
    assert read_training_log(path) == rows
