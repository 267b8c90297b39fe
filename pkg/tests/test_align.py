import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import erfinv

from condalign.align import (
    AlignedScore,
    FusionWeights,
    TargetDistribution,
    fuse,
    mean_align,
    quantile_map,
    score_pipeline,
    to_target,
)
from condalign.conddist import BiasSpec, Categorical, SpecError, fit_empirical
from condalign.metrics import ks_uniformity, mutual_information_binned

from conftest import keys_of


weight = st.one_of(st.just(0.0), st.floats(0.01, 10), st.floats(-10, -0.01))


def fit1(samples, **kw):
    return fit_empirical(samples, keys_of(len(samples)), BiasSpec((Categorical("all", 1),)), **kw)


def two_bucket(m0, m1, n=100, k=0.0):
    spec = BiasSpec((Categorical("c", 2),))
    x = np.r_[np.full(n, m0), np.full(n, m1)].astype(float)
    keys = np.r_[np.zeros(n, int), np.ones(n, int)][:, None]
    return fit_empirical(x, keys, spec, shrinkage_strength=k, min_bucket_count=1)


class TestQuantileMap:
    def test_worked_example(self):
        assert quantile_map(fit1([1.0, 2.0, 3.0, 4.0]), (0,), 2.0) == pytest.approx(0.375)

    def test_constant_bucket(self):
        assert quantile_map(fit1(np.full(20, 3.5)), (0,), 3.5) == 0.5

    def test_randomized_spreads_atoms(self):
        m = fit1(np.r_[np.zeros(500), np.ones(500)])
        x = np.random.default_rng(0).integers(0, 2, 100_000).astype(float)
        z = quantile_map(m, (0,), x, "randomized", seed=1)
        counts = np.histogram(z, bins=10, range=(0, 1))[0]
        assert stats.chisquare(counts).pvalue > 0.01
        # deterministic mode collapses each atom to a single value
        assert np.unique(quantile_map(m, (0,), x)).size == 2

    def test_randomized_is_seeded(self):
        m = fit1(np.r_[np.zeros(50), np.ones(50)])
        x = np.ones(200)
        a = quantile_map(m, (0,), x, "randomized", seed=7)
        np.testing.assert_array_equal(a, quantile_map(m, (0,), x, "randomized", seed=7))
        assert np.all((a >= 0.5) & (a <= 1.0))

    def test_errors(self):
        m = fit1([1.0, 2.0])
        with pytest.raises(ValueError, match="finite"):
            quantile_map(m, (0,), math.nan)
        with pytest.raises(SpecError):
            quantile_map(m, (1,), 1.0)
        with pytest.raises(ValueError, match="tie_mode"):
            quantile_map(m, (0,), 1.0, "stochastic")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=100),
           st.lists(st.floats(-200, 200), min_size=2, max_size=50))
    def test_monotone_in_x(self, samples, probe):
        m = fit1(samples)
        p = np.sort(probe)
        assert np.all(np.diff(quantile_map(m, (0,), p)) >= 0)
        g = TargetDistribution("gaussian", 1.0, 2.0)
        assert np.all(np.diff(to_target(quantile_map(m, (0,), p), g)) >= 0)

    def test_per_bucket_uniformity_and_independence(self, small_spec):
        rng = np.random.default_rng(3)
        n = 30000
        keys = np.column_stack([rng.integers(0, 3, n), rng.integers(0, 3, n)])
        x = rng.lognormal(0.3 * keys[:, 0] + 0.2 * keys[:, 1], 0.5 + 0.1 * keys[:, 0])
        m = fit_empirical(x, keys, small_spec)
        z = quantile_map(m, keys, x)
        flat = small_spec.flat_index(keys)
        for b in np.unique(flat):
            sel = flat == b
            if sel.sum() >= 1000:
                assert ks_uniformity(z[sel]).d_statistic <= 0.02
        est = mutual_information_binned(z, flat, seed=0)
        assert est.nats <= est.noise_floor_nats
        assert mutual_information_binned(x, flat, seed=0).nats > 10 * est.noise_floor_nats


class TestMeanAlign:
    def test_examples(self):
        m = two_bucket(3.0, 7.0)
        assert mean_align(m, (0,), 5.0) == 2.0
        assert mean_align(m, (1,), 7.0) == 0.0

    def test_empty_bucket_uses_fallback(self):
        spec = BiasSpec((Categorical("c", 2),))
        m = fit_empirical([3.0, 5.0], keys_of(2), spec)
        assert mean_align(m, (1,), 5.0) == 1.0

    def test_per_bucket_centering(self, small_spec):
        rng = np.random.default_rng(4)
        keys = np.column_stack([rng.integers(0, 3, 20000), rng.integers(0, 3, 20000)])
        x = rng.normal(2.0 * keys[:, 0] - keys[:, 1], 1.0)
        m = fit_empirical(x, keys, small_spec, shrinkage_strength=0.0)
        z = mean_align(m, keys, x)
        flat = small_spec.flat_index(keys)
        for b in np.unique(flat):
            assert abs(z[flat == b].mean()) <= 0.01 * z.std()

    def test_log1p_space(self):
        x = np.array([0.0, 1.0, 3.0])
        m = fit1(x, transform_space="log1p")
        np.testing.assert_allclose(mean_align(m, (0,), x), np.log1p(x) - np.log1p(x).mean())


class TestToTarget:
    def test_uniform_identity(self):
        z = np.linspace(0, 1, 11)
        np.testing.assert_array_equal(to_target(z, TargetDistribution()), z)

    def test_gaussian(self):
        g = TargetDistribution("gaussian")
        assert to_target(0.5, g) == 0.0
        # oracle: inverse error function
        assert math.sqrt(2) * erfinv(2 * 0.8413 - 1) == pytest.approx(1.0, abs=1e-3)
        assert to_target(0.8413, g) == pytest.approx(math.sqrt(2) * erfinv(2 * 0.8413 - 1),
                                                     abs=1e-12)

    def test_empirical_grid(self):
        t = TargetDistribution("empirical", grid=(0.0, 10.0))
        assert to_target(0.5, t) == 5.0
        assert to_target(0.25, t) == 0.0

    @pytest.mark.parametrize("z", [-0.1, 1.1, math.nan])
    def test_out_of_range(self, z):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            to_target(z, TargetDistribution("gaussian"))

    @pytest.mark.parametrize("kw", [dict(kind="gaussian", scale=0.0),
                                    dict(kind="empirical", grid=(1.0,)),
                                    dict(kind="empirical", grid=(2.0, 1.0)),
                                    dict(kind="cauchy")])
    def test_invalid_targets(self, kw):
        with pytest.raises(ValueError):
            TargetDistribution(**kw)

    @pytest.mark.parametrize("t", [TargetDistribution(), TargetDistribution("gaussian", 1.0, 3.0),
                                   TargetDistribution("empirical", grid=(0.0, 1.0, 5.0))])
    def test_dict_round_trip(self, t):
        assert TargetDistribution.from_dict(t.to_dict()) == t


class TestFuse:
    def test_examples(self):
        assert fuse({"a": 0.2, "b": 0.8}, FusionWeights({"a": 0.5, "b": 0.5})) == 0.5
        assert fuse({"a": 0.37}, FusionWeights({"a": 1.0})) == 0.37
        assert fuse({"a": 0.3, "b": 0.1}, FusionWeights({"a": 2, "b": -1})) == pytest.approx(0.5)

    def test_missing_signal(self):
        with pytest.raises(KeyError, match="b"):
            fuse({"a": 0.1}, FusionWeights({"a": 1.0, "b": 1.0}))
        # zero weight needs no score
        assert fuse({"a": 0.1}, FusionWeights({"a": 1.0, "b": 0.0})) == 0.1

    def test_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            fuse({"a": math.inf}, FusionWeights({"a": 1.0}))

    @pytest.mark.parametrize("w", [{"a": 0.0}, {"a": math.nan}, {}])
    def test_invalid_weights(self, w):
        with pytest.raises(ValueError):
            FusionWeights(w)

    @given(st.dictionaries(st.sampled_from("abcde"), weight, min_size=1), weight.filter(bool),
           st.integers(0, 2**31))
    def test_linear_and_order_free(self, raw, alpha, seed):
        if not any(raw.values()):
            raw["a"] = 1.0
        w = FusionWeights(raw)
        z = {k: np.random.default_rng(seed).random(5) for k in raw}
        base = fuse(z, w)
        np.testing.assert_allclose(fuse(z, w.scaled(alpha)), alpha * base, rtol=1e-12,
                                   atol=1e-12)
        shuffled = FusionWeights(dict(reversed(list(raw.items()))))
        np.testing.assert_array_equal(fuse(z, shuffled), base)


class TestScorePipeline:
    def test_single_quantile_signal_is_cdf(self):
        m = fit1([1.0, 2.0, 3.0, 4.0])
        out = score_pipeline({"w": 2.5}, {"w": (0,)}, {"w": m}, {"w": "quantile"},
                             {"w": TargetDistribution()}, FusionWeights({"w": 1.0}))
        assert out.z_final == m.cdf((0,), 2.5)
        assert not out.mixed_methods

    def test_two_signals_sum(self):
        a = fit1([1.0, 2.0, 3.0, 4.0])
        b = fit1(np.full(10, 6.0))
        out = score_pipeline({"a": 2.0, "b": 6.0}, {"a": (0,), "b": (0,)}, {"a": a, "b": b},
                             {"a": "quantile", "b": "quantile"}, None,
                             FusionWeights({"a": 1, "b": 1}))
        assert out.z_final == pytest.approx(0.375 + 0.5)

    def test_mean_method_at_bucket_means(self):
        m = two_bucket(3.0, 7.0)
        keys = np.array([[0], [1]])
        out = score_pipeline({"a": np.array([3.0, 7.0]), "b": np.array([3.0, 7.0])},
                             {"a": keys, "b": keys}, {"a": m, "b": m},
                             {"a": "mean", "b": "mean"},
                             {"a": TargetDistribution("gaussian")},
                             FusionWeights({"a": 0.3, "b": 0.7}))
        np.testing.assert_array_equal(out.z_final, [0.0, 0.0])

    def test_mixed_methods_flagged(self):
        m = two_bucket(3.0, 7.0)
        out = score_pipeline({"a": 5.0, "b": 5.0}, {"a": (0,), "b": (0,)}, {"a": m, "b": m},
                             {"a": "quantile", "b": "mean"}, None, FusionWeights({"a": 1.0}))
        assert isinstance(out, AlignedScore)
        assert out.mixed_methods

    def test_gaussian_target_applied(self):
        m = fit1([1.0, 2.0, 3.0, 4.0])
        out = score_pipeline({"w": 2.5}, {"w": (0,)}, {"w": m}, {"w": "quantile"},
                             {"w": TargetDistribution("gaussian")}, FusionWeights({"w": 1.0}))
        assert out.z_final == 0.0

    def test_randomized_deterministic_given_seed(self):
        m = fit1(np.r_[np.zeros(50), np.ones(50)])
        x = np.ones(100)
        args = ({"a": x, "b": x}, {"a": keys_of(100), "b": keys_of(100)}, {"a": m, "b": m},
                {"a": "quantile", "b": "quantile"}, None, FusionWeights({"a": 1, "b": 1}))
        one = score_pipeline(*args, tie_mode="randomized", seed=5)
        two = score_pipeline(*args, tie_mode="randomized", seed=5)
        np.testing.assert_array_equal(one.z_final, two.z_final)
        # each signal gets its own stream
        assert not np.array_equal(one.per_signal["a"][1], one.per_signal["b"][1])

    def test_errors(self):
        m = fit1([1.0, 2.0])
        w = FusionWeights({"a": 1.0})
        with pytest.raises(KeyError, match="prediction"):
            score_pipeline({}, {"a": (0,)}, {"a": m}, {"a": "quantile"}, None, w)
        with pytest.raises(ValueError, match="method"):
            score_pipeline({"a": 1.0}, {"a": (0,)}, {"a": m}, {"a": "median"}, None, w)
