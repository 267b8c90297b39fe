import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import ndtri

from condalign.align import TargetDistribution, mean_align
from condalign.conddist import BiasSpec, Categorical, fit_empirical
from condalign.metrics import (
    ConstantInputError,
    bucket_stats,
    chi_square_uniformity,
    equal_mass_bins,
    key_codes,
    ks_against_target,
    ks_uniformity,
    mutual_information_binned,
    plugin_mi,
    rank_correlation,
)


def hazen(n):
    return (np.arange(1, n + 1) - 0.5) / n


def crosstab_mi(a, b):
    """Independent plug-in MI from scipy's contingency table."""
    table = stats.contingency.crosstab(a, b).count
    p = table / table.sum()
    outer = p.sum(axis=1, keepdims=True) * p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / outer[nz])))


class TestMutualInformation:
    def test_copy_of_fair_bit(self):
        keys = np.tile([0, 1], 500)
        est = mutual_information_binned(keys.astype(float), keys, n_bins_z=2)
        assert est.nats == pytest.approx(math.log(2), abs=1e-12)

    def test_monotone_map_of_four_keys(self):
        keys = np.repeat(np.arange(4), 250)
        z = keys * 0.25 + np.linspace(0, 0.2, 1000)  # strictly increasing in key index
        est = mutual_information_binned(z, keys, n_bins_z=4)
        assert est.nats == pytest.approx(math.log(4), abs=1e-12)
        assert crosstab_mi(equal_mass_bins(z, 4), keys) == pytest.approx(math.log(4), abs=1e-12)

    def test_independent_near_floor(self):
        rng = np.random.default_rng(0)
        small = mutual_information_binned(rng.random(2000), rng.integers(0, 4, 2000), seed=1)
        big = mutual_information_binned(rng.random(200000), rng.integers(0, 4, 200000), seed=1)
        assert small.nats <= 3 * small.noise_floor_nats
        assert big.nats <= 3 * big.noise_floor_nats
        assert big.noise_floor_nats < small.noise_floor_nats / 20

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(20, 400), st.integers(2, 6), st.integers(2, 20))
    def test_matches_crosstab_oracle(self, seed, n, n_keys, n_bins):
        rng = np.random.default_rng(seed)
        keys = rng.integers(0, n_keys, n)
        z = np.round(rng.random(n) + 0.2 * keys, 1)  # ties included
        n_bins = min(n_bins, n)
        est = mutual_information_binned(z, keys, n_bins_z=n_bins)
        assert est.nats >= 0 and est.noise_floor_nats >= 0
        assert est.nats == pytest.approx(crosstab_mi(equal_mass_bins(z, n_bins), keys),
                                         abs=1e-12)

    def test_multi_dimensional_keys(self):
        keys = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 100)
        z = key_codes(keys).astype(float)
        assert mutual_information_binned(z, keys, n_bins_z=4).nats == pytest.approx(math.log(4))

    def test_floor_is_seeded(self):
        rng = np.random.default_rng(2)
        z, k = rng.random(500), rng.integers(0, 3, 500)
        a = mutual_information_binned(z, k, seed=5)
        assert a == mutual_information_binned(z, k, seed=5)
        assert a.n_permutations == 5 and a.n_samples == 500

    def test_errors(self):
        with pytest.raises(ValueError, match="keys"):
            mutual_information_binned([0.1, 0.2], [0])
        with pytest.raises(ValueError, match="n_bins_z"):
            mutual_information_binned([0.1, 0.2], [0, 1], n_bins_z=1)
        with pytest.raises(ValueError, match="at least"):
            mutual_information_binned([0.1, 0.2], [0, 1], n_bins_z=4)

    def test_plugin_never_negative(self):
        assert plugin_mi(np.zeros(10, int), np.arange(10) % 3) == 0.0


class TestKs:
    @pytest.mark.parametrize("n", [1, 7, 1000])
    def test_hazen_grid(self, n):
        assert ks_uniformity(hazen(n)).d_statistic == pytest.approx(0.5 / n, abs=1e-15)

    def test_point_mass(self):
        assert ks_uniformity(np.full(10, 0.5)).d_statistic == 0.5

    def test_endpoints(self):
        assert ks_uniformity([0.0, 1.0]).d_statistic == 0.5

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=200))
    def test_matches_scipy(self, z):
        d = ks_uniformity(z).d_statistic
        assert 0 <= d <= 1
        assert d == pytest.approx(stats.kstest(z, "uniform").statistic, abs=1e-12)

    def test_threshold(self):
        r = ks_uniformity(hazen(10), threshold=0.02)
        assert r.passed is False
        assert ks_uniformity(hazen(100), threshold=0.02).passed is True
        assert ks_uniformity(hazen(100)).passed is None

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            ks_uniformity([])
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            ks_uniformity([0.5, 1.5])

    def test_gaussian_target(self):
        n = 500
        d = ks_against_target(2.0 + 3.0 * ndtri(hazen(n)), TargetDistribution("gaussian", 2.0, 3.0))
        assert d.d_statistic == pytest.approx(0.5 / n, abs=1e-12)

    def test_uniform_target_reduces(self):
        z = np.random.default_rng(3).random(300)
        assert ks_against_target(z, TargetDistribution()) == ks_uniformity(z)

    def test_mismatched_target(self):
        z = np.random.default_rng(4).random(10_000)
        assert ks_against_target(z, TargetDistribution("gaussian")).d_statistic > 0.05

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-5, 5), st.floats(0.1, 10))
    def test_invariant_under_increasing_map(self, seed, shift, stretch):
        v = np.random.default_rng(seed).normal(1.0, 2.0, 200)
        grid = np.sort(np.random.default_rng(seed + 1).normal(1.0, 2.0, 64))
        pairs = [(TargetDistribution("gaussian", 1.0, 2.0),
                  TargetDistribution("gaussian", shift + stretch, 2.0 * stretch)),
                 (TargetDistribution("empirical", grid=tuple(grid)),
                  TargetDistribution("empirical", grid=tuple(shift + stretch * grid)))]
        for before, after in pairs:
            d0 = ks_against_target(v, before).d_statistic
            d1 = ks_against_target(shift + stretch * v, after).d_statistic
            assert d1 == pytest.approx(d0, abs=1e-9)
        # oracle: scipy one-sample KS against the same normal law
        assert ks_against_target(v, pairs[0][0]).d_statistic == pytest.approx(
            stats.kstest(v, "norm", args=(1.0, 2.0)).statistic, abs=1e-12)

    def test_chi_square(self):
        stat, p = chi_square_uniformity(hazen(1000))
        assert stat == 0.0 and p == 1.0


class TestRankCorrelation:
    def test_examples(self):
        a = np.array([1.0, 2.0, 3.0, 4.0])
        assert rank_correlation(a, a) == 1.0
        assert rank_correlation(a, -a) == -1.0
        assert rank_correlation(a, [1, 2, 4, 3]) == pytest.approx(1 - 6 * 2 / (4 * 15))
        assert rank_correlation(a, [1, 2, 4, 3]) == pytest.approx(0.8)

    def test_constant_input_flagged(self):
        with pytest.raises(ConstantInputError):
            rank_correlation([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])

    def test_errors(self):
        with pytest.raises(ValueError, match="mismatch"):
            rank_correlation([1, 2], [1, 2, 3])
        with pytest.raises(ValueError, match="two"):
            rank_correlation([1], [1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(3, 200))
    def test_matches_scipy_and_monotone_invariant(self, seed, n):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=n)
        b = np.round(a + rng.normal(size=n), 1)
        if np.ptp(b) == 0:
            return
        rho = rank_correlation(a, b)
        assert rho == pytest.approx(stats.spearmanr(a, b).statistic, abs=1e-12)
        assert rank_correlation(np.exp(a), b ** 3) == pytest.approx(rho, abs=1e-12)


class TestBucketStats:
    def test_single_bucket(self):
        s = bucket_stats([1.0, 2.0, 3.0], np.zeros((3, 1), int))
        assert s[(0,)].count == 3
        assert s[(0,)].mean == 2.0
        assert s[(0,)].std == pytest.approx(math.sqrt(2 / 3), abs=1e-15)

    def test_centered_after_mean_align(self):
        spec = BiasSpec((Categorical("c", 2),))
        rng = np.random.default_rng(5)
        keys = rng.integers(0, 2, 1000)[:, None]
        x = rng.normal(3.0 * keys[:, 0], 1.0)
        m = fit_empirical(x, keys, spec, shrinkage_strength=0.0)
        stats_ = bucket_stats(mean_align(m, keys, x), keys)
        for s in stats_.values():
            assert abs(s.mean) <= 1e-12

    def test_empty(self):
        assert bucket_stats([], np.empty((0, 2), int)) == {}

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bucket_stats([1.0, 2.0], [[0]])
