"""Conditional distributions of a predicted behavior given discretized bias factors.

A :class:`ConditionalModel` stores, for every combination of bias buckets, a
compact summary of the predicted behavior observed in that bucket: either a
Hazen quantile grid (empirical estimator) or the moments of a gaussian or
lognormal fit (parametric estimator).  A fallback summary fitted on all data
answers empty buckets and is the shrinkage target for sparse ones.

Empirical CDF convention
------------------------
Order statistics sit at plotting positions ``(i - 0.5) / n``.  The quantile
function linearly interpolates between them, and the CDF is its inverse,
clamped to ``[1/(2n), 1 - 1/(2n)]`` outside the sample range.  Where the
quantile function is flat (tied samples) the CDF returns the midpoint of the
flat probability interval, so a degenerate sample answers 0.5.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
from scipy import special

FORMAT_VERSION = 1
DEFAULT_GRID_SIZE = 1024
DEFAULT_MIN_BUCKET_COUNT = 100
DEFAULT_SHRINKAGE = 50.0
TRANSFORM_SPACES = ("identity", "log1p")
FAMILIES = ("gaussian", "lognormal")

BiasKey = tuple[int, ...]


class SpecError(ValueError):
    """A bias specification, reading, or key is invalid."""


class ModelMismatchError(ValueError):
    """Two models (or a model and a configuration) are not compatible."""


# ---------------------------------------------------------------------------
# Bias specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Categorical:
    name: str
    cardinality: int

    def __post_init__(self):
        if isinstance(self.cardinality, bool) or int(self.cardinality) != self.cardinality:
            raise SpecError(f"dimension {self.name!r}: cardinality must be an integer")
        if self.cardinality < 1:
            raise SpecError(f"dimension {self.name!r}: cardinality must be >= 1")
        object.__setattr__(self, "cardinality", int(self.cardinality))

    kind = "categorical"

    @property
    def n_buckets(self) -> int:
        return self.cardinality

    def bucket(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(v)) or np.any(v != np.round(v)):
            raise SpecError(f"dimension {self.name!r}: categorical codes must be integers")
        if np.any(v < 0) or np.any(v >= self.cardinality):
            bad = v[(v < 0) | (v >= self.cardinality)][0]
            raise SpecError(
                f"dimension {self.name!r}: code {bad:g} outside [0, {self.cardinality})"
            )
        return v.astype(np.int64)

    def midpoints(self) -> np.ndarray:
        return np.arange(self.cardinality, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": "categorical", "cardinality": self.cardinality}


@dataclass(frozen=True)
class Continuous:
    name: str
    boundaries: tuple[float, ...]

    def __post_init__(self):
        b = tuple(float(v) for v in self.boundaries)
        if len(b) < 1:
            raise SpecError(f"dimension {self.name!r}: needs at least one boundary")
        if not all(math.isfinite(v) for v in b):
            raise SpecError(f"dimension {self.name!r}: boundaries must be finite")
        if any(b1 <= b0 for b0, b1 in zip(b, b[1:])):
            raise SpecError(f"dimension {self.name!r}: boundaries must be strictly increasing")
        object.__setattr__(self, "boundaries", b)

    kind = "continuous"

    @property
    def n_buckets(self) -> int:
        return len(self.boundaries) + 1

    def bucket(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise SpecError(f"dimension {self.name!r}: continuous readings must be finite")
        # half-open buckets [b[i-1], b[i])
        return np.searchsorted(np.asarray(self.boundaries), v, side="right").astype(np.int64)

    def _edge_gap(self) -> float:
        b = self.boundaries
        return (b[-1] - b[0]) / (len(b) - 1) if len(b) > 1 else 1.0

    def bucket_range(self, i: int) -> tuple[float, float]:
        """Finite range of bucket ``i``; the open ends extend by the mean boundary gap."""
        b = self.boundaries
        gap = self._edge_gap()
        lo = b[i - 1] if i > 0 else b[0] - gap
        hi = b[i] if i < len(b) else b[-1] + gap
        return lo, hi

    def midpoints(self) -> np.ndarray:
        return np.array([sum(self.bucket_range(i)) / 2 for i in range(self.n_buckets)])

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": "continuous", "boundaries": list(self.boundaries)}


Dimension = Union[Categorical, Continuous]


@dataclass(frozen=True)
class BiasSpec:
    """Ordered bias dimensions; their bucket combinations index a ConditionalModel."""

    dimensions: tuple[Dimension, ...]

    def __post_init__(self):
        dims = tuple(self.dimensions)
        if not dims:
            raise SpecError("a bias spec needs at least one dimension")
        names = [d.name for d in dims]
        if len(set(names)) != len(names):
            raise SpecError(f"duplicate dimension names in {names}")
        object.__setattr__(self, "dimensions", dims)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(d.n_buckets for d in self.dimensions)

    @property
    def n_dims(self) -> int:
        return len(self.dimensions)

    @property
    def n_combinations(self) -> int:
        return int(np.prod(self.shape))

    def all_keys(self) -> list[BiasKey]:
        return [tuple(int(i) for i in k) for k in np.ndindex(*self.shape)]

    def validate_keys(self, keys) -> np.ndarray:
        """Return ``keys`` as an ``(n, n_dims)`` int array, raising on invalid entries."""
        k = np.asarray(keys)
        if k.ndim == 1:
            k = k.reshape(1, -1)
        if k.ndim != 2 or k.shape[1] != self.n_dims:
            raise SpecError(f"bias keys must have {self.n_dims} indices, got shape {k.shape}")
        if k.size and not np.issubdtype(k.dtype, np.integer):
            if not np.all(k == np.round(k)):
                raise SpecError("bias key indices must be integers")
        k = k.astype(np.int64)
        if np.any(k < 0) or np.any(k >= np.asarray(self.shape)):
            bad = k[np.any((k < 0) | (k >= np.asarray(self.shape)), axis=1)][0]
            raise SpecError(f"bias key {tuple(int(i) for i in bad)} outside shape {self.shape}")
        return k

    def flat_index(self, keys) -> np.ndarray:
        k = self.validate_keys(keys)
        return np.ravel_multi_index(k.T, self.shape).astype(np.int64)

    def unflatten(self, flat: int) -> BiasKey:
        return tuple(int(i) for i in np.unravel_index(int(flat), self.shape))

    def to_dict(self) -> dict:
        return {"dimensions": [d.to_dict() for d in self.dimensions]}

    @classmethod
    def from_dict(cls, d: dict) -> "BiasSpec":
        dims = []
        for i, entry in enumerate(d.get("dimensions") or []):
            kind = entry.get("kind")
            name = entry.get("name", f"dim{i}")
            if kind == "categorical":
                dims.append(Categorical(name, entry["cardinality"]))
            elif kind == "continuous":
                dims.append(Continuous(name, tuple(entry["boundaries"])))
            else:
                raise SpecError(f"dimension {name!r}: unknown kind {kind!r}")
        return cls(tuple(dims))

    def fingerprint(self) -> str:
        return content_hash(self.to_dict())


def content_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def discretize(bias_values: Sequence[float], spec: BiasSpec) -> BiasKey:
    """Map one record's raw bias readings to its bucket coordinates.

    >>> spec = BiasSpec((Continuous("duration", (10, 30)),))
    >>> discretize([10.0], spec)
    (1,)
    """
    values = list(bias_values)
    if len(values) != spec.n_dims:
        raise SpecError(f"expected {spec.n_dims} bias readings, got {len(values)}")
    return tuple(int(d.bucket(np.asarray([v]))[0]) for d, v in zip(spec.dimensions, values))


def discretize_many(bias_values, spec: BiasSpec) -> np.ndarray:
    """Vectorized :func:`discretize` over an ``(n, n_dims)`` array of readings."""
    v = np.asarray(bias_values, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != spec.n_dims:
        raise SpecError(f"expected readings of shape (n, {spec.n_dims}), got {v.shape}")
    out = np.empty(v.shape, dtype=np.int64)
    for j, d in enumerate(spec.dimensions):
        out[:, j] = d.bucket(v[:, j])
    return out


# ---------------------------------------------------------------------------
# Exact moment accumulation
# ---------------------------------------------------------------------------


def exact_sum(values, power: int = 1) -> Fraction:
    """Exact rational sum of ``v**power`` over float64 ``values`` (power 1 or 2).

    Sums stored this way merge associatively and commutatively, bit for bit.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return Fraction(0)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot accumulate non-finite values")
    mant, expo = np.frexp(v)
    ints = (mant * 2.0**53).astype(np.int64)
    shifts = expo.astype(np.int64) - 53
    base = int(shifts.min())
    order = np.argsort(shifts, kind="stable")
    s_sorted = shifts[order]
    i_sorted = ints[order]
    cuts = np.flatnonzero(np.diff(s_sorted)) + 1
    total = 0
    for block_i, block_s in zip(np.split(i_sorted, cuts), np.split(s_sorted, cuts)):
        shift = power * (int(block_s[0]) - base)
        vals = block_i.tolist()
        block = sum(vals) if power == 1 else sum(a * a for a in vals)
        total += block << shift
    return Fraction(total) * Fraction(2) ** (power * base)


# ---------------------------------------------------------------------------
# Piecewise-linear quantile functions
# ---------------------------------------------------------------------------


def hazen_levels(grid_size: int) -> np.ndarray:
    return (np.arange(1, grid_size + 1) - 0.5) / grid_size


def _segment(P, V, a, b, x):
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = (x - V[a]) / (V[b] - V[a])
    return P[a] + np.nan_to_num(frac) * (P[b] - P[a])


def knot_interval(P: np.ndarray, V: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Probability interval ``[F(x-), F(x)]`` of a piecewise-linear quantile function.

    ``P`` runs from 0 to 1 strictly increasing; ``V`` is non-decreasing.  The
    interval has positive width only where the quantile function is flat at x.
    """
    x = np.asarray(x, dtype=np.float64)
    m = len(V)
    il = np.searchsorted(V, x, side="left")
    il_c = np.minimum(il, m - 1)
    exact_l = (il < m) & (V[il_c] == x)
    seg_l = _segment(P, V, np.clip(il - 1, 0, m - 1), il_c, x)
    lower = np.select([il >= m, exact_l, il == 0], [1.0, P[il_c], 0.0], default=seg_l)

    ir = np.searchsorted(V, x, side="right") - 1
    ir_c = np.maximum(ir, 0)
    exact_u = (ir >= 0) & (V[ir_c] == x)
    seg_u = _segment(P, V, ir_c, np.minimum(ir + 1, m - 1), x)
    upper = np.select([ir < 0, exact_u, ir >= m - 1], [0.0, P[ir_c], 1.0], default=seg_u)
    return lower, upper


def invert_monotone(t: np.ndarray, F: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Invert a non-decreasing sampled CDF ``F(xs)``; flat runs map to their mean x."""
    uF, inv = np.unique(F, return_inverse=True)
    ux = np.bincount(inv, weights=xs) / np.bincount(inv)
    return np.interp(t, uF, ux)


class EmpiricalSummary:
    """Hazen quantile grid plus exact count, sum, min and max of one bucket's samples.

    While a bucket holds at most ``grid_size`` samples they are kept (sorted)
    next to the grid, so merging small buckets is an exact refit; memory per
    bucket stays bounded by the grid size either way.
    """

    kind = "empirical"

    def __init__(self, quantile_grid, count: int, total: Fraction, sample_min: float,
                 sample_max: float, samples=None):
        grid = np.array(quantile_grid, dtype=np.float64)
        grid.setflags(write=False)
        self.quantile_grid = grid
        self.count = int(count)
        self.total = Fraction(total)
        self.sample_min = float(sample_min)
        self.sample_max = float(sample_max)
        self.samples = None
        if samples is not None:
            kept = np.array(samples, dtype=np.float64)
            if kept.size != self.count or np.any(np.diff(kept) < 0):
                raise ValueError("retained samples must be sorted and match the count")
            kept.setflags(write=False)
            self.samples = kept
        if self.count > 0:
            if np.any(np.diff(grid) < 0):
                raise ValueError("quantile grid must be non-decreasing")
            if not (self.sample_min <= grid[0] and grid[-1] <= self.sample_max):
                raise ValueError("quantile grid must lie within [sample_min, sample_max]")

    @classmethod
    def from_samples(cls, samples, grid_size: int = DEFAULT_GRID_SIZE) -> "EmpiricalSummary":
        s = np.sort(np.asarray(samples, dtype=np.float64).ravel())
        n = s.size
        if n == 0:
            return cls.empty(grid_size)
        positions = (np.arange(n) + 0.5) / n
        grid = np.interp(hazen_levels(grid_size), positions, s)
        return cls(grid, n, exact_sum(s), s[0], s[-1], s if n <= grid_size else None)

    @classmethod
    def empty(cls, grid_size: int = DEFAULT_GRID_SIZE) -> "EmpiricalSummary":
        return cls(np.zeros(grid_size), 0, Fraction(0), math.nan, math.nan)

    @property
    def grid_size(self) -> int:
        return self.quantile_grid.size

    @property
    def sample_mean(self) -> float:
        return float(self.total / self.count) if self.count else math.nan

    @property
    def clamp(self) -> tuple[float, float]:
        return 0.5 / self.count, 1.0 - 0.5 / self.count

    @cached_property
    def knots(self) -> tuple[np.ndarray, np.ndarray]:
        if self.count == 0:
            raise ValueError("empty summary cannot be queried")
        lo, hi = self.clamp
        P = np.concatenate([[0.0, lo], hazen_levels(self.grid_size), [hi, 1.0]])
        V = np.concatenate([[self.sample_min] * 2, self.quantile_grid, [self.sample_max] * 2])
        order = np.lexsort((V, P))
        P, V = P[order], V[order]
        P, first = np.unique(P, return_index=True)
        return P, V[first]

    def interval(self, x):
        P, V = self.knots
        return knot_interval(P, V, x)

    def cdf(self, x):
        lower, upper = self.interval(x)
        lo, hi = self.clamp
        return np.clip(0.5 * (lower + upper), lo, hi)

    def inv_cdf(self, tau):
        P, V = self.knots
        return np.interp(tau, P, V)

    def rank_count(self, x):
        """Mid-rank count ``#{< x} + #{= x}/2`` reconstructed from the grid."""
        x = np.asarray(x, dtype=np.float64)
        if self.samples is not None:
            below = np.searchsorted(self.samples, x, side="left")
            upto = np.searchsorted(self.samples, x, side="right")
            return 0.5 * (below + upto).astype(np.float64)
        inside = self.count * self.cdf(x)
        return np.where(x < self.sample_min, 0.0,
                        np.where(x > self.sample_max, float(self.count), inside))

    def merge(self, other: "EmpiricalSummary") -> "EmpiricalSummary":
        if other.grid_size != self.grid_size:
            raise ModelMismatchError("cannot merge summaries with different grid sizes")
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        if self.samples is not None and other.samples is not None:
            return EmpiricalSummary.from_samples(np.concatenate([self.samples, other.samples]),
                                                 self.grid_size)
        n = self.count + other.count
        xs = np.unique(np.concatenate([self.knots[1], other.knots[1]]))
        F = (self.rank_count(xs) + other.rank_count(xs)) / n
        grid = invert_monotone(hazen_levels(self.grid_size), F, xs)
        lo = min(self.sample_min, other.sample_min)
        hi = max(self.sample_max, other.sample_max)
        return EmpiricalSummary(np.clip(grid, lo, hi), n, self.total + other.total, lo, hi)

    def to_dict(self) -> dict:
        empty = self.count == 0
        return {
            "kind": "empirical",
            "count": self.count,
            "total": str(self.total),
            "sample_min": None if empty else self.sample_min,
            "sample_max": None if empty else self.sample_max,
            "quantile_grid": self.quantile_grid.tolist(),
            "samples": None if self.samples is None else self.samples.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmpiricalSummary":
        nan = math.nan
        return cls(d["quantile_grid"], d["count"], Fraction(d["total"]),
                   nan if d["sample_min"] is None else d["sample_min"],
                   nan if d["sample_max"] is None else d["sample_max"], d.get("samples"))


@dataclass(frozen=True)
class ParametricLaw:
    family: str
    location: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"parametric scale must be positive, got {self.scale}")

    def _standardize(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.family == "gaussian":
            return (x - self.location) / self.scale
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x > 0, (np.log(np.where(x > 0, x, 1.0)) - self.location) / self.scale,
                            -np.inf)

    def cdf(self, x):
        return special.ndtr(self._standardize(x))

    def interval(self, x):
        p = self.cdf(x)
        return p, p

    def inv_cdf(self, tau):
        q = self.location + self.scale * special.ndtri(np.asarray(tau, dtype=np.float64))
        return q if self.family == "gaussian" else np.exp(q)

    @property
    def mean(self) -> float:
        if self.family == "gaussian":
            return self.location
        return math.exp(self.location + 0.5 * self.scale**2)


class ParametricSummary:
    """Exact first and second moments of the fitted variable (x, or log x for lognormal)."""

    kind = "parametric"

    def __init__(self, family: str, count: int, total: Fraction, total_sq: Fraction):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
        self.family = family
        self.count = int(count)
        self.total = Fraction(total)
        self.total_sq = Fraction(total_sq)

    @classmethod
    def from_samples(cls, samples, family: str) -> "ParametricSummary":
        x = np.asarray(samples, dtype=np.float64).ravel()
        if family == "lognormal":
            if np.any(x <= 0):
                raise ValueError("lognormal fit requires all values > 0")
            x = np.log(x)
        return cls(family, x.size, exact_sum(x), exact_sum(x, power=2))

    @property
    def location(self) -> float:
        return float(self.total / self.count) if self.count else math.nan

    @property
    def raw_scale(self) -> float:
        """Maximum-likelihood (population) scale; 0 for degenerate samples."""
        if not self.count:
            return math.nan
        mean = self.total / self.count
        var = self.total_sq / self.count - mean * mean
        return math.sqrt(max(float(var), 0.0))

    def merge(self, other: "ParametricSummary") -> "ParametricSummary":
        if other.family != self.family:
            raise ModelMismatchError("cannot merge summaries of different families")
        return ParametricSummary(self.family, self.count + other.count,
                                 self.total + other.total, self.total_sq + other.total_sq)

    def to_dict(self) -> dict:
        return {
            "kind": "parametric",
            "family": self.family,
            "count": self.count,
            "total": str(self.total),
            "total_sq": str(self.total_sq),
            "location": self.location if self.count else None,
            "scale": self.raw_scale if self.count else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParametricSummary":
        return cls(d["family"], d["count"], Fraction(d["total"]), Fraction(d["total_sq"]))


Summary = Union[EmpiricalSummary, ParametricSummary]


def _summary_from_dict(d: dict) -> Summary:
    if d["kind"] == "empirical":
        return EmpiricalSummary.from_dict(d)
    if d["kind"] == "parametric":
        return ParametricSummary.from_dict(d)
    raise ValueError(f"unknown summary kind {d['kind']!r}")


class _Mixture:
    """Count-weighted blend of a sparse bucket's CDF with the fallback CDF."""

    def __init__(self, components: Sequence[EmpiricalSummary], weights: Sequence[float]):
        self.components = list(components)
        w = np.asarray(weights, dtype=np.float64)
        self.weights = w / w.sum()

    def interval(self, x):
        lower = np.zeros(np.shape(x))
        upper = np.zeros(np.shape(x))
        for c, w in zip(self.components, self.weights):
            lo, up = c.interval(x)
            lower = lower + w * lo
            upper = upper + w * up
        return lower, upper

    def cdf(self, x):
        return sum(w * c.cdf(x) for c, w in zip(self.components, self.weights))

    @cached_property
    def _inverse_knots(self):
        xs = np.unique(np.concatenate([c.knots[1] for c in self.components]))
        F = self.cdf(xs)
        return np.concatenate([[0.0], F, [1.0]]), np.concatenate([[xs[0]], xs, [xs[-1]]])

    def inv_cdf(self, tau):
        F, xs = self._inverse_knots
        return invert_monotone(np.asarray(tau, dtype=np.float64), F, xs)


# ---------------------------------------------------------------------------
# Conditional model
# ---------------------------------------------------------------------------


def apply_transform(x, transform_space: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if transform_space == "identity":
        return x
    if transform_space == "log1p":
        if np.any(x <= -1):
            raise ValueError("log1p transform requires values > -1")
        return np.log1p(x)
    raise ValueError(f"unknown transform_space {transform_space!r}")


def invert_transform(y, transform_space: str) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.expm1(y) if transform_space == "log1p" else y


class ConditionalModel:
    """Per-bucket distribution summaries of one signal, with a global fallback.

    Query methods take raw (untransformed) behavior values and accept either a
    single key tuple or an ``(n, n_dims)`` array of keys.  ``cond_mean`` and
    :func:`~condalign.align.mean_align` work in the model's transform space.
    A fitted model is never mutated; all queries are pure.
    """

    def __init__(self, spec: BiasSpec, buckets: dict, fallback: Summary, *,
                 estimator: str = "empirical", family: str | None = None,
                 grid_size: int = DEFAULT_GRID_SIZE,
                 min_bucket_count: int = DEFAULT_MIN_BUCKET_COUNT,
                 shrinkage_strength: float = DEFAULT_SHRINKAGE,
                 signal_name: str = "x", transform_space: str = "identity"):
        if estimator not in ("empirical", "parametric"):
            raise ValueError(f"unknown estimator {estimator!r}")
        if transform_space not in TRANSFORM_SPACES:
            raise ValueError(f"unknown transform_space {transform_space!r}")
        if min_bucket_count < 1:
            raise ValueError("min_bucket_count must be >= 1")
        if not shrinkage_strength >= 0:
            raise ValueError("shrinkage_strength must be >= 0")
        self.spec = spec
        self.buckets = {int(k): v for k, v in sorted(buckets.items()) if v.count >= 1}
        self.fallback = fallback
        self.estimator = estimator
        self.family = family
        self.grid_size = int(grid_size)
        self.min_bucket_count = int(min_bucket_count)
        self.shrinkage_strength = float(shrinkage_strength)
        self.signal_name = signal_name
        self.transform_space = transform_space
        self._laws: dict[int, object] = {}

    @classmethod
    def empty(cls, spec: BiasSpec, **config) -> "ConditionalModel":
        """Identity element for :func:`merge`."""
        estimator = config.get("estimator", "empirical")
        if estimator == "empirical":
            fallback = EmpiricalSummary.empty(config.get("grid_size", DEFAULT_GRID_SIZE))
        else:
            fallback = ParametricSummary(config["family"], 0, Fraction(0), Fraction(0))
        return cls(spec, {}, fallback, **config)

    # -- configuration -----------------------------------------------------

    def config(self) -> dict:
        return {
            "estimator": self.estimator,
            "family": self.family,
            "grid_size": self.grid_size,
            "min_bucket_count": self.min_bucket_count,
            "shrinkage_strength": self.shrinkage_strength,
            "signal_name": self.signal_name,
            "transform_space": self.transform_space,
        }

    def transform(self, x) -> np.ndarray:
        return apply_transform(x, self.transform_space)

    def bucket_count(self, key) -> int:
        flat = int(self.spec.flat_index(key)[0])
        s = self.buckets.get(flat)
        return s.count if s is not None else 0

    def bucket_counts(self) -> dict[BiasKey, int]:
        return {self.spec.unflatten(f): s.count for f, s in self.buckets.items()}

    def sparse_buckets(self) -> list[BiasKey]:
        """Keys (including empty ones) answered by shrinkage or the fallback."""
        return [k for k in self.spec.all_keys()
                if self.bucket_count(k) < self.min_bucket_count]

    # -- per-bucket law resolution ------------------------------------------

    def _fallback_law(self):
        if self.fallback.count == 0:
            raise ValueError("model has no data; fit it before querying")
        if self.estimator == "empirical":
            return self.fallback
        scale = self.fallback.raw_scale
        if scale <= 0:
            raise ValueError("fallback scale is zero: all training values are identical")
        return ParametricLaw(self.family, self.fallback.location, scale)

    def _law(self, flat: int):
        law = self._laws.get(flat)
        if law is not None:
            return law
        bucket = self.buckets.get(flat)
        n = bucket.count if bucket is not None else 0
        k = self.shrinkage_strength
        sparse = n < self.min_bucket_count and k > 0
        fallback = self._fallback_law()
        if n == 0:
            law = fallback
        elif self.estimator == "empirical":
            law = _Mixture([bucket, fallback], [n, k]) if sparse else bucket
        else:
            scale = bucket.raw_scale
            if n < 2 or scale <= 0:
                scale = fallback.scale
            loc = bucket.location
            if sparse:
                loc = (n * loc + k * fallback.location) / (n + k)
                scale = (n * scale + k * fallback.scale) / (n + k)
            law = ParametricLaw(self.family, loc, scale)
        self._laws[flat] = law
        return law

    def _bucket_mean(self, flat: int) -> tuple[int, float]:
        bucket = self.buckets.get(flat)
        if bucket is None:
            return 0, math.nan
        if self.estimator == "empirical":
            return bucket.count, bucket.sample_mean
        scale = bucket.raw_scale
        if bucket.count < 2 or scale <= 0:
            scale = self._fallback_law().scale
        return bucket.count, ParametricLaw(self.family, bucket.location, scale).mean

    def _fallback_mean(self) -> float:
        law = self._fallback_law()
        return law.sample_mean if self.estimator == "empirical" else law.mean

    # -- queries -------------------------------------------------------------

    def _dispatch(self, keys, values, fn):
        values = np.asarray(values, dtype=np.float64)
        scalar = values.ndim == 0 and np.ndim(keys) == 1
        v = np.atleast_1d(values)
        k = self.spec.validate_keys(keys)
        if k.shape[0] == 1 and v.shape[0] != 1:
            k = np.broadcast_to(k, (v.shape[0], k.shape[1]))
        if v.shape[0] == 1 and k.shape[0] != 1:
            v = np.broadcast_to(v, (k.shape[0],))
        if k.shape[0] != v.shape[0]:
            raise ValueError(f"{k.shape[0]} keys for {v.shape[0]} values")
        flat = np.ravel_multi_index(k.T, self.spec.shape)
        out = np.empty(v.shape[0])
        for f in np.unique(flat):
            mask = flat == f
            out[mask] = fn(self._law(int(f)), v[mask])
        return float(out[0]) if scalar else out

    def interval(self, keys, x):
        """``(F(x-), F(x))`` per query; wide only at probability atoms."""
        y = self.transform(x)
        lower = self._dispatch(keys, y, lambda law, v: law.interval(v)[0])
        upper = self._dispatch(keys, y, lambda law, v: law.interval(v)[1])
        return lower, upper

    def cdf(self, keys, x):
        return self._dispatch(keys, self.transform(x), lambda law, v: law.cdf(v))

    def inv_cdf(self, keys, tau):
        t = np.asarray(tau, dtype=np.float64)
        if not np.all(np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
            raise ValueError("tau must lie in [0, 1]")
        y = self._dispatch(keys, t, lambda law, v: law.inv_cdf(v))
        return invert_transform(y, self.transform_space) if np.ndim(y) else float(
            invert_transform(y, self.transform_space))

    def cond_mean(self, keys):
        """Shrunken conditional mean ``(n m_b + k m_f) / (n + k)`` in transform space."""
        k = self.spec.validate_keys(keys)
        flat = np.ravel_multi_index(k.T, self.spec.shape)
        m_f = self._fallback_mean()
        strength = self.shrinkage_strength
        out = np.empty(flat.shape[0])
        for f in np.unique(flat):
            n, m_b = self._bucket_mean(int(f))
            out[flat == f] = m_f if n == 0 else (n * m_b + strength * m_f) / (n + strength)
        return float(out[0]) if np.ndim(keys) == 1 else out

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "conditional_model",
            **self.config(),
            "bias_spec": self.spec.to_dict(),
            "bias_spec_fingerprint": self.spec.fingerprint(),
            "fallback": self.fallback.to_dict(),
            "buckets": [{"key": list(self.spec.unflatten(f)), "summary": s.to_dict()}
                        for f, s in self.buckets.items()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionalModel":
        if d.get("kind") != "conditional_model":
            raise ValueError(f"not a conditional model document (kind={d.get('kind')!r})")
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {d.get('format_version')!r}")
        spec = BiasSpec.from_dict(d["bias_spec"])
        if spec.fingerprint() != d["bias_spec_fingerprint"]:
            raise ValueError("bias spec fingerprint does not match its contents")
        buckets = {int(spec.flat_index(b["key"])[0]): _summary_from_dict(b["summary"])
                   for b in d["buckets"]}
        return cls(spec, buckets, _summary_from_dict(d["fallback"]),
                   estimator=d["estimator"], family=d["family"], grid_size=d["grid_size"],
                   min_bucket_count=d["min_bucket_count"],
                   shrinkage_strength=d["shrinkage_strength"],
                   signal_name=d["signal_name"], transform_space=d["transform_space"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ConditionalModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Fitting and module-level operations
# ---------------------------------------------------------------------------


def _prepare(x, keys, spec: BiasSpec, transform_space: str):
    y = apply_transform(np.asarray(x, dtype=np.float64).ravel(), transform_space)
    if y.size == 0:
        raise ValueError("cannot fit a conditional model on an empty stream")
    if not np.all(np.isfinite(y)):
        raise ValueError("all behavior values must be finite after the transform")
    k = spec.validate_keys(keys)
    if k.shape[0] != y.size:
        raise ValueError(f"{k.shape[0]} keys for {y.size} values")
    flat = np.ravel_multi_index(k.T, spec.shape)
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    cuts = np.flatnonzero(np.diff(flat_sorted)) + 1
    groups = {int(f[0]): y[order][idx_start:idx_end]
              for f, idx_start, idx_end in zip(np.split(flat_sorted, cuts),
                                               np.concatenate([[0], cuts]),
                                               np.concatenate([cuts, [y.size]]))}
    return y, groups


def fit_empirical(x, keys, spec: BiasSpec, *, grid_size: int = DEFAULT_GRID_SIZE,
                  min_bucket_count: int = DEFAULT_MIN_BUCKET_COUNT,
                  shrinkage_strength: float = DEFAULT_SHRINKAGE,
                  transform_space: str = "identity",
                  signal_name: str = "x") -> ConditionalModel:
    """Fit per-bucket Hazen quantile grids of ``x`` grouped by bias key.

    Parameters
    ----------
    x : array_like, shape (n,)
        Predicted behavior values, in raw space.
    keys : array_like, shape (n, n_dims)
        Bucket coordinates of each record (see :func:`discretize_many`).
    spec : BiasSpec
    grid_size : int
        Number of equi-spaced probability levels ``(j - 0.5) / G`` stored per bucket.
    min_bucket_count, shrinkage_strength :
        Buckets with fewer samples than ``min_bucket_count`` blend their CDF with
        the fallback, weighting bucket and fallback by ``n`` and ``k``.
    transform_space : {"identity", "log1p"}

    Returns
    -------
    ConditionalModel
    """
    if grid_size < 1:
        raise ValueError("grid_size must be positive")
    y, groups = _prepare(x, keys, spec, transform_space)
    buckets = {f: EmpiricalSummary.from_samples(g, grid_size) for f, g in groups.items()}
    return ConditionalModel(spec, buckets, EmpiricalSummary.from_samples(y, grid_size),
                            estimator="empirical", grid_size=grid_size,
                            min_bucket_count=min_bucket_count,
                            shrinkage_strength=shrinkage_strength,
                            signal_name=signal_name, transform_space=transform_space)


def fit_parametric(x, keys, spec: BiasSpec, family: str = "gaussian", *,
                   min_bucket_count: int = DEFAULT_MIN_BUCKET_COUNT,
                   shrinkage_strength: float = DEFAULT_SHRINKAGE,
                   transform_space: str = "identity",
                   signal_name: str = "x") -> ConditionalModel:
    """Per-bucket maximum-likelihood gaussian or lognormal fits (population scale)."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    y, groups = _prepare(x, keys, spec, transform_space)
    buckets = {f: ParametricSummary.from_samples(g, family) for f, g in groups.items()}
    model = ConditionalModel(spec, buckets, ParametricSummary.from_samples(y, family),
                             estimator="parametric", family=family,
                             min_bucket_count=min_bucket_count,
                             shrinkage_strength=shrinkage_strength,
                             signal_name=signal_name, transform_space=transform_space)
    model._fallback_law()  # reject a degenerate fallback at fit time
    return model


def fit_in_chunks(chunks: Iterable[tuple], spec: BiasSpec, fit=fit_empirical,
                  **config) -> ConditionalModel:
    """Fit each ``(x, keys)`` chunk independently and combine the partial models."""
    model = None
    for x, keys in chunks:
        part = fit(x, keys, spec, **config)
        model = part if model is None else merge(model, part)
    if model is None:
        raise ValueError("cannot fit a conditional model on an empty stream")
    return model


def merge(a: ConditionalModel, b: ConditionalModel) -> ConditionalModel:
    """Combine two partial models fitted on disjoint data.

    Counts and sums merge exactly.  Empirical grids merge by adding the
    mid-rank counts each grid implies and re-inverting at the grid levels, so
    the result matches a pooled fit to within grid interpolation.
    """
    if a.spec != b.spec:
        raise ModelMismatchError("cannot merge models with different bias specs")
    if a.config() != b.config():
        raise ModelMismatchError(f"cannot merge models with configs {a.config()} and {b.config()}")
    buckets = dict(a.buckets)
    for f, s in b.buckets.items():
        buckets[f] = buckets[f].merge(s) if f in buckets else s
    cfg = a.config()
    return ConditionalModel(a.spec, buckets, a.fallback.merge(b.fallback), **cfg)


def cdf(model, key, x):
    return model.cdf(key, x)


def inv_cdf(model, key, tau):
    return model.inv_cdf(key, tau)


def cond_mean(model, key):
    return model.cond_mean(key)
