"""Independence, uniformity and recovery metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


class ConstantInputError(ValueError):
    """Rank correlation is undefined because an input has zero rank variance."""


@dataclass(frozen=True)
class MiEstimate:
    nats: float
    n_bins_z: int
    n_samples: int
    noise_floor_nats: float
    n_permutations: int = 1

    @property
    def ratio_to_floor(self) -> float:
        return self.nats / self.noise_floor_nats if self.noise_floor_nats > 0 else math.inf

    def to_dict(self) -> dict:
        return {"nats": self.nats, "n_bins_z": self.n_bins_z, "n_samples": self.n_samples,
                "noise_floor_nats": self.noise_floor_nats,
                "n_permutations": self.n_permutations}


@dataclass(frozen=True)
class KsResult:
    d_statistic: float
    n_samples: int
    threshold: float | None = None

    @property
    def passed(self) -> bool | None:
        return None if self.threshold is None else self.d_statistic <= self.threshold

    def to_dict(self) -> dict:
        return {"d_statistic": self.d_statistic, "n_samples": self.n_samples,
                "threshold": self.threshold, "passed": self.passed}


@dataclass(frozen=True)
class BucketStat:
    count: int
    mean: float
    std: float


def key_codes(keys) -> np.ndarray:
    """Dense integer codes for 1-D labels or rows of an ``(n, d)`` key array."""
    k = np.asarray(keys)
    if k.ndim == 1:
        return np.unique(k, return_inverse=True)[1].ravel()
    return np.unique(k, axis=0, return_inverse=True)[1].ravel()


def equal_mass_bins(z, n_bins: int) -> np.ndarray:
    """Bin index per sample; edges at the empirical quantiles, ties share a bin."""
    z = np.asarray(z, dtype=np.float64)
    edges = np.quantile(z, np.linspace(0.0, 1.0, n_bins + 1)[1:-1])
    return np.searchsorted(edges, z, side="right")


def plugin_mi(a_codes: np.ndarray, b_codes: np.ndarray) -> float:
    """Plug-in mutual information (nats) of two discrete code vectors."""
    na = int(a_codes.max()) + 1
    nb = int(b_codes.max()) + 1
    joint = np.bincount(a_codes * nb + b_codes, minlength=na * nb).reshape(na, nb)
    p = joint / joint.sum()
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    mi = float(np.sum(p[nz] * np.log(p[nz] / (pa @ pb)[nz])))
    return max(mi, 0.0)


def mutual_information_binned(z, keys, n_bins_z: int = 16, *, n_permutations: int = 5,
                              seed: int = 0) -> MiEstimate:
    """Plug-in MI between equal-mass bins of ``z`` and the discrete bias key.

    The noise floor is the mean of the same estimator over ``n_permutations``
    seeded shuffles of the keys, which breaks any dependence while keeping
    both marginals.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    codes = key_codes(keys)
    if codes.size != z.size:
        raise ValueError(f"{z.size} scores for {codes.size} keys")
    if n_bins_z < 2:
        raise ValueError("n_bins_z must be >= 2")
    if z.size < n_bins_z:
        raise ValueError(f"need at least {n_bins_z} samples, got {z.size}")
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    bins = equal_mass_bins(z, n_bins_z)
    rng = np.random.default_rng(seed)
    floor = np.mean([plugin_mi(bins, rng.permutation(codes)) for _ in range(n_permutations)])
    return MiEstimate(plugin_mi(bins, codes), n_bins_z, z.size, float(floor), n_permutations)


def ks_uniformity(z, threshold: float | None = None) -> KsResult:
    """Exact one-sample KS distance between the sample and Uniform(0, 1)."""
    z = np.sort(np.asarray(z, dtype=np.float64).ravel())
    n = z.size
    if n == 0:
        raise ValueError("KS statistic of an empty sample")
    if not np.all(np.isfinite(z)) or z[0] < 0 or z[-1] > 1:
        raise ValueError("uniformity test expects values in [0, 1]")
    i = np.arange(1, n + 1)
    d = max(float(np.max(i / n - z)), float(np.max(z - (i - 1) / n)))
    return KsResult(d, n, threshold)


def ks_against_target(values, target, threshold: float | None = None) -> KsResult:
    """KS distance between ``values`` and a :class:`~condalign.align.TargetDistribution`."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("KS statistic of an empty sample")
    return ks_uniformity(target.cdf(v), threshold)


def chi_square_uniformity(z, n_bins: int = 10) -> tuple[float, float]:
    """Pearson chi-square statistic and p-value for equal-width bins on [0, 1]."""
    counts = np.histogram(np.asarray(z, dtype=np.float64), bins=n_bins, range=(0.0, 1.0))[0]
    res = stats.chisquare(counts)
    return float(res.statistic), float(res.pvalue)


def rank_correlation(a, b) -> float:
    """Spearman rho: Pearson correlation of midranks."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("rank correlation needs at least two samples")
    ra = stats.rankdata(a) - (a.size + 1) / 2
    rb = stats.rankdata(b) - (b.size + 1) / 2
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0:
        raise ConstantInputError("rank correlation undefined for constant input")
    return float(np.clip((ra @ rb) / denom, -1.0, 1.0))


def bucket_stats(z, keys) -> dict:
    """Exact per-key count, mean and population std."""
    z = np.asarray(z, dtype=np.float64).ravel()
    k = np.asarray(keys)
    if k.ndim == 1:
        k = k.reshape(-1, 1) if k.size else k.reshape(0, 1)
    if k.shape[0] != z.size:
        raise ValueError(f"{z.size} values for {k.shape[0]} keys")
    if z.size == 0:
        return {}
    uniq, inv = np.unique(k, axis=0, return_inverse=True)
    inv = inv.ravel()
    out = {}
    for i, row in enumerate(uniq):
        vals = z[inv == i]
        out[tuple(int(v) for v in row)] = BucketStat(vals.size, float(vals.mean()),
                                                    float(vals.std()))
    return out
