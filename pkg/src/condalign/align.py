"""Turn predicted behaviors into bias-independent interest scores.

Quantile mapping replaces a prediction by its conditional CDF value given the
record's bias bucket, which is uniform within every bucket.  Mean alignment
subtracts the conditional mean instead.  Uniform scores can be reshaped to a
target distribution, and per-signal scores are fused with fixed weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import special

TIE_MODES = ("deterministic", "randomized")
METHODS = ("quantile", "mean")


@dataclass(frozen=True)
class TargetDistribution:
    """Distribution that uniform scores are reshaped into by its inverse CDF.

    ``kind`` is ``uniform01``, ``gaussian`` (with ``location`` and ``scale``), or
    ``empirical`` with ``grid`` holding reference values at probability levels
    ``(j - 0.5) / m``.
    """

    kind: str = "uniform01"
    location: float = 0.0
    scale: float = 1.0
    grid: tuple = ()

    def __post_init__(self):
        if self.kind == "gaussian":
            if not (np.isfinite(self.scale) and self.scale > 0):
                raise ValueError("gaussian target needs a positive scale")
        elif self.kind == "empirical":
            g = np.asarray(self.grid, dtype=np.float64)
            if g.size < 2 or np.any(np.diff(g) < 0) or not np.all(np.isfinite(g)):
                raise ValueError("empirical target needs a non-decreasing grid of >= 2 points")
            object.__setattr__(self, "grid", tuple(g.tolist()))
        elif self.kind != "uniform01":
            raise ValueError(f"unknown target kind {self.kind!r}")

    def _levels(self) -> np.ndarray:
        m = len(self.grid)
        return (np.arange(1, m + 1) - 0.5) / m

    def ppf(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "uniform01":
            return z
        if self.kind == "gaussian":
            return self.location + self.scale * special.ndtri(z)
        return np.interp(z, self._levels(), np.asarray(self.grid))

    def cdf(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "uniform01":
            return np.clip(v, 0.0, 1.0)
        if self.kind == "gaussian":
            return special.ndtr((v - self.location) / self.scale)
        g = np.asarray(self.grid)
        levels = self._levels()
        inside = np.interp(v, g, levels)
        return np.where(v < g[0], 0.0, np.where(v > g[-1], 1.0, inside))

    def to_dict(self) -> dict:
        if self.kind == "gaussian":
            return {"kind": "gaussian", "location": self.location, "scale": self.scale}
        if self.kind == "empirical":
            return {"kind": "empirical", "grid": list(self.grid)}
        return {"kind": "uniform01"}

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "TargetDistribution":
        d = dict(d or {"kind": "uniform01"})
        kind = d.pop("kind", "uniform01")
        if kind == "gaussian":
            return cls("gaussian", float(d.get("location", 0.0)), float(d.get("scale", 1.0)))
        if kind == "empirical":
            return cls("empirical", grid=tuple(d["grid"]))
        return cls(kind)


@dataclass(frozen=True)
class FusionWeights:
    weights: Mapping[str, float]

    def __post_init__(self):
        w = {str(k): float(v) for k, v in dict(self.weights).items()}
        if not all(np.isfinite(v) for v in w.values()):
            raise ValueError("fusion weights must be finite")
        if not any(v != 0 for v in w.values()):
            raise ValueError("at least one fusion weight must be nonzero")
        object.__setattr__(self, "weights", w)

    def scaled(self, alpha: float) -> "FusionWeights":
        return FusionWeights({k: alpha * v for k, v in self.weights.items()})


@dataclass
class AlignedScore:
    """Per-signal ``(method, z)`` pairs and their weighted fusion."""

    per_signal: dict = field(default_factory=dict)
    z_final: object = None

    @property
    def mixed_methods(self) -> bool:
        return len({method for method, _ in self.per_signal.values()}) > 1


def _finite(x, what="x"):
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} must be finite")
    return a


def quantile_map(model, key, x, tie_mode: str = "deterministic", seed=None):
    """Conditional CDF value of ``x`` in its bias bucket.

    In ``randomized`` mode, a value sitting on a probability atom is spread
    uniformly over the atom's interval ``[F(x-), F(x)]``, which makes the
    output exactly uniform for discrete laws.  ``seed`` may be an int or a
    ``numpy.random.Generator``.
    """
    _finite(x)
    if tie_mode == "deterministic":
        return model.cdf(key, x)
    if tie_mode != "randomized":
        raise ValueError(f"unknown tie_mode {tie_mode!r}; expected one of {TIE_MODES}")
    lower, upper = model.interval(key, x)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random(np.shape(lower))
    z = lower + u * (upper - lower)
    return float(z) if np.ndim(z) == 0 else z


def mean_align(model, key, x):
    """``transform(x) - E[X | Y = key]``, in the model's transform space."""
    return model.transform(_finite(x)) - model.cond_mean(key)


def to_target(z, target: TargetDistribution):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)) or np.any(z < 0) or np.any(z > 1):
        raise ValueError("to_target expects scores in [0, 1]")
    out = target.ppf(z)
    return float(out) if out.ndim == 0 else out


def fuse(per_signal: Mapping[str, object], weights: FusionWeights):
    """``sum_i w_i z_i`` accumulated in sorted signal order."""
    total = None
    for name in sorted(weights.weights):
        w = weights.weights[name]
        if w == 0:
            continue
        if name not in per_signal:
            raise KeyError(f"no score for weighted signal {name!r}")
        term = w * _finite(per_signal[name], f"score of {name!r}")
        total = term if total is None else total + term
    return float(total) if np.ndim(total) == 0 else total


def score_pipeline(predictions: Mapping[str, object], keys: Mapping[str, object],
                   models: Mapping[str, object], methods: Mapping[str, str],
                   targets: Mapping[str, TargetDistribution] | None,
                   weights: FusionWeights, *, tie_mode: str = "deterministic",
                   seed=None) -> AlignedScore:
    """Align every configured signal and fuse the results.

    Quantile-mapped scores are passed through their target distribution (if
    any); mean-aligned scores are not, since they are not uniform.  With
    ``tie_mode="randomized"`` each signal draws from its own stream derived
    from ``seed`` in sorted signal order.
    """
    targets = targets or {}
    names = sorted(methods)
    seeds = np.random.SeedSequence(seed).spawn(len(names)) if tie_mode == "randomized" else None
    per_signal = {}
    for i, name in enumerate(names):
        for what, table in (("prediction", predictions), ("key", keys), ("model", models)):
            if name not in table:
                raise KeyError(f"signal {name!r} has no {what}")
        method = methods[name]
        if method == "quantile":
            rng = np.random.default_rng(seeds[i]) if seeds is not None else None
            z = quantile_map(models[name], keys[name], predictions[name], tie_mode, rng)
            target = targets.get(name)
            if target is not None and target.kind != "uniform01":
                z = to_target(z, target)
        elif method == "mean":
            z = mean_align(models[name], keys[name], predictions[name])
        else:
            raise ValueError(f"signal {name!r}: unknown method {method!r}")
        per_signal[name] = (method, z)
    z_final = fuse({n: z for n, (_, z) in per_signal.items()}, weights)
    return AlignedScore(per_signal, z_final)
