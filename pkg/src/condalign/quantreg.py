"""Linear quantile regression of a behavior on encoded bias features.

Each probability level gets its own linear predictor, trained jointly by
mini-batch subgradient descent on the pinball loss.  Predictions at a query
point are sorted across levels so quantile curves never cross.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conddist import (
    FORMAT_VERSION,
    BiasSpec,
    Categorical,
    apply_transform,
    invert_transform,
    knot_interval,
)


def pinball_loss(residual, tau) -> np.ndarray:
    """``r * (tau - 1[r < 0])``, elementwise; broadcasts ``tau`` over the last axis."""
    r = np.asarray(residual, dtype=np.float64)
    return r * (tau - (r < 0))


def encode_bias_features(keys, spec: BiasSpec) -> np.ndarray:
    """One-hot columns for categorical indices, bucket midpoints for continuous ones."""
    k = spec.validate_keys(keys)
    cols = []
    for j, dim in enumerate(spec.dimensions):
        if isinstance(dim, Categorical):
            cols.append(np.eye(dim.cardinality)[k[:, j]])
        else:
            cols.append(dim.midpoints()[k[:, j]][:, None])
    return np.hstack(cols)


@dataclass(frozen=True)
class QuantileRegConfig:
    learning_rate: float = 0.2
    epochs: int = 60
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


class _QuantileCurve:
    """CDF view of sorted quantile predictions at one query point."""

    def __init__(self, taus: np.ndarray, q: np.ndarray):
        self.taus = taus
        self.P = np.concatenate([[0.0], taus, [1.0]])
        self.V = np.concatenate([[q[0]], q, [q[-1]]])

    def interval(self, x):
        return knot_interval(self.P, self.V, x)

    def cdf(self, x):
        lower, upper = self.interval(x)
        return np.clip(0.5 * (lower + upper), self.taus[0], self.taus[-1])

    def inv_cdf(self, tau):
        return np.interp(tau, self.P, self.V)


@dataclass
class QuantileRegModel:
    tau_levels: np.ndarray
    intercepts: np.ndarray
    weights: np.ndarray  # shape (n_features, n_levels)
    loss_history: list = field(default_factory=list)
    spec: BiasSpec | None = None
    signal_name: str = "x"
    transform_space: str = "identity"

    def __post_init__(self):
        self.tau_levels = np.asarray(self.tau_levels, dtype=np.float64)
        self.intercepts = np.asarray(self.intercepts, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1, self.tau_levels.size)
        _check_taus(self.tau_levels)

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    def predict_raw(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64).reshape(-1, self.n_features)
        return f @ self.weights + self.intercepts

    def predict(self, features) -> np.ndarray:
        """Quantile predictions, shape ``(n, n_levels)``, sorted to prevent crossing."""
        return np.sort(self.predict_raw(features), axis=1)

    # -- ConditionalModel-compatible queries (need a bias spec) --------------

    def transform(self, x):
        return apply_transform(x, self.transform_space)

    def _curves(self, keys):
        if self.spec is None:
            raise ValueError("model was fitted on raw features; key queries need a bias spec")
        k = self.spec.validate_keys(keys)
        uniq, inv = np.unique(k, axis=0, return_inverse=True)
        preds = self.predict(encode_bias_features(uniq, self.spec))
        return [_QuantileCurve(self.tau_levels, q) for q in preds], inv.ravel(), k.shape[0]

    def _dispatch(self, keys, values, fn):
        values = np.asarray(values, dtype=np.float64)
        scalar = values.ndim == 0 and np.ndim(keys) == 1
        curves, inv, n_keys = self._curves(keys)
        v = np.broadcast_to(np.atleast_1d(values), (max(n_keys, np.size(values)),))
        if n_keys == 1:
            inv = np.zeros(v.shape[0], dtype=np.int64)
        out = np.empty(v.shape[0])
        for i, curve in enumerate(curves):
            mask = inv == i
            out[mask] = fn(curve, v[mask])
        return float(out[0]) if scalar else out

    def interval(self, keys, x):
        y = self.transform(x)
        return (self._dispatch(keys, y, lambda c, v: c.interval(v)[0]),
                self._dispatch(keys, y, lambda c, v: c.interval(v)[1]))

    def cdf(self, keys, x):
        return self._dispatch(keys, self.transform(x), lambda c, v: c.cdf(v))

    def inv_cdf(self, keys, tau):
        y = self._dispatch(keys, tau, lambda c, v: c.inv_cdf(v))
        out = invert_transform(y, self.transform_space)
        return float(out) if np.ndim(out) == 0 else out

    def cond_mean(self, keys):
        """Average of the predicted quantiles, a plug-in estimate of E[X|Y]."""
        curves, inv, _ = self._curves(keys)
        means = np.array([c.V[1:-1].mean() for c in curves])[inv]
        return float(means[0]) if np.ndim(keys) == 1 else means

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "quantile_regression",
            "signal_name": self.signal_name,
            "transform_space": self.transform_space,
            "bias_spec": None if self.spec is None else self.spec.to_dict(),
            "tau_levels": self.tau_levels.tolist(),
            "intercepts": self.intercepts.tolist(),
            "weights": self.weights.tolist(),
            "loss_history": list(self.loss_history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileRegModel":
        if d.get("kind") != "quantile_regression" or d.get("format_version") != FORMAT_VERSION:
            raise ValueError("not a supported quantile regression document")
        spec = None if d["bias_spec"] is None else BiasSpec.from_dict(d["bias_spec"])
        return cls(d["tau_levels"], d["intercepts"],
                   np.asarray(d["weights"], dtype=np.float64).reshape(-1, len(d["tau_levels"])),
                   d["loss_history"], spec, d["signal_name"], d["transform_space"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "QuantileRegModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_taus(taus: np.ndarray) -> None:
    if taus.size == 0 or np.any(taus <= 0) or np.any(taus >= 1) or not np.all(np.isfinite(taus)):
        raise ValueError("tau levels must lie strictly inside (0, 1)")
    if np.any(np.diff(taus) <= 0):
        raise ValueError("tau levels must be strictly increasing")


def _feature_matrix(features, n: int) -> np.ndarray:
    """``(n, d)`` float matrix; a 1-D input is one feature, ``d = 0`` is allowed."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f.reshape(-1, 1)
    if f.ndim != 2 or f.shape[0] != n:
        raise ValueError(f"expected {n} feature rows, got shape {f.shape}")
    return f


def fit_quantile_regression(features, x, tau_levels, config: QuantileRegConfig | None = None,
                            ) -> QuantileRegModel:
    """Fit one linear quantile predictor per level by pinball-loss SGD.

    Features are standardized internally and the coefficients mapped back.
    Step sizes decay as ``1/sqrt(epoch)``, scaled by the spread of ``x``; the
    reported parameters for each epoch are the average of that epoch's
    iterates.  A zero residual contributes a zero subgradient, so constant
    targets are fixed points.
    """
    cfg = config or QuantileRegConfig()
    taus = np.asarray(tau_levels, dtype=np.float64)
    _check_taus(taus)
    y = np.asarray(x, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("cannot fit quantile regression on an empty stream")
    F = _feature_matrix(features, y.size)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(y))):
        raise ValueError("features and targets must be finite")

    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (F - mu) / sd
    spread = float(y.std()) or 1.0

    rng = np.random.default_rng(cfg.seed)
    W = np.zeros((Z.shape[1], taus.size))
    b = np.quantile(y, taus)
    n = y.size
    history = []

    def full_loss(W_, b_):
        return float(pinball_loss(y[:, None] - (Z @ W_ + b_), taus).mean(axis=0).sum())

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * spread / math.sqrt(epoch + 1)
        order = rng.permutation(n)
        W_sum = np.zeros_like(W)
        b_sum = np.zeros_like(b)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            r = y[idx, None] - (Z[idx] @ W + b)
            g = np.where(r > 0, -taus, np.where(r < 0, 1.0 - taus, 0.0))
            W -= lr * (Z[idx].T @ g) / idx.size
            b -= lr * g.mean(axis=0)
            W_sum += W
            b_sum += b
            steps += 1
        W_avg, b_avg = W_sum / steps, b_sum / steps
        loss = full_loss(W_avg, b_avg)
        if not math.isfinite(loss):
            raise FloatingPointError(f"pinball loss became non-finite at epoch {epoch}")
        history.append(loss)

    weights = W_avg / sd[:, None]
    intercepts = b_avg - mu @ weights
    return QuantileRegModel(taus, intercepts, weights, history)


def fit_quantile_regression_on_keys(x, keys, spec: BiasSpec, tau_levels,
                                    config: QuantileRegConfig | None = None, *,
                                    signal_name: str = "x",
                                    transform_space: str = "identity") -> QuantileRegModel:
    """Quantile regression on encoded bias keys; the result answers key-based CDF queries."""
    y = apply_transform(x, transform_space)
    model = fit_quantile_regression(encode_bias_features(keys, spec), y, tau_levels, config)
    model.spec = spec
    model.signal_name = signal_name
    model.transform_space = transform_space
    return model
