"""Behavior predictors: the step that turns features into a predicted behavior x.

Continuous behaviors get an identity-link linear model trained on squared
error, binary behaviors a logistic model trained on cross-entropy.  Both use
seeded mini-batch gradient descent on internally standardized features.  The
oracle predictor reads the simulator's latent value instead, which isolates
alignment quality from prediction error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

LINKS = ("identity", "logistic")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 20
    batch_size: int = 256
    seed: int = 0
    l2_penalty: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError("epochs must be an integer >= 1")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError("batch_size must be an integer >= 1")
        if not self.l2_penalty >= 0:
            raise ValueError("l2_penalty must be >= 0")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "epochs": self.epochs,
                "batch_size": self.batch_size, "seed": self.seed,
                "l2_penalty": self.l2_penalty}


# largest and smallest doubles strictly inside (0, 1)
_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


def _link(eta, link: str):
    if link == "logistic":
        # expit rounds to exactly 1.0 once eta > ~36.7
        return np.clip(special.expit(eta), _P_LO, _P_HI)
    return eta


def loss_and_grad(weights, intercept: float, features, targets, link: str, l2: float = 0.0):
    """Training objective and its gradient.

    identity: ``0.5 * mean((eta - s)**2) + 0.5 * l2 * |w|**2``
    logistic: ``mean(log(1 + e**eta) - s * eta) + 0.5 * l2 * |w|**2``

    The intercept is not penalized.  Returns ``(loss, grad_w, grad_b)``.
    """
    w = np.asarray(weights, dtype=np.float64)
    s = np.asarray(targets, dtype=np.float64).ravel()
    X = np.asarray(features, dtype=np.float64).reshape(s.size, w.size)
    eta = X @ w + intercept
    if link == "identity":
        resid = eta - s
        data_loss = 0.5 * np.mean(resid**2)
    elif link == "logistic":
        data_loss = np.mean(np.logaddexp(0.0, eta) - s * eta)
        resid = special.expit(eta) - s
    else:
        raise ValueError(f"unknown link {link!r}")
    loss = float(data_loss + 0.5 * l2 * w @ w)
    grad_w = X.T @ resid / s.size + l2 * w
    return loss, grad_w, float(resid.mean())


@dataclass
class PredictorModel:
    weights: np.ndarray
    intercept: float
    link: str
    signal_name: str = "x"
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.intercept = float(self.intercept)

    kind = "trained"

    def predict(self, features):
        """``link(w . f + b)`` for one feature vector or an ``(n, d)`` matrix."""
        f = np.asarray(features, dtype=np.float64)
        single = f.ndim == 1
        f2 = f.reshape(1, -1) if single else f
        if f2.ndim != 2 or f2.shape[1] != self.weights.size:
            raise ValueError(f"expected {self.weights.size} features, got shape {f.shape}")
        if not np.all(np.isfinite(f2)):
            raise ValueError("features must be finite")
        x = _link(f2 @ self.weights + self.intercept, self.link)
        return float(x[0]) if single else x

    def to_dict(self) -> dict:
        return {"kind": "trained", "link": self.link, "signal_name": self.signal_name,
                "weights": self.weights.tolist(), "intercept": self.intercept,
                "loss_history": list(self.loss_history)}

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorModel":
        return cls(d["weights"], d["intercept"], d["link"], d["signal_name"], d["loss_history"])


@dataclass
class OraclePredictor:
    """Returns the simulator's latent behavior for a signal, unchanged."""

    signal_name: str = "x"
    kind = "oracle"

    def to_dict(self) -> dict:
        return {"kind": "oracle", "signal_name": self.signal_name}


def predictor_from_dict(d: dict):
    if d["kind"] == "oracle":
        return OraclePredictor(d["signal_name"])
    return PredictorModel.from_dict(d)


def oracle_predict(record, signal: str) -> float:
    try:
        return record.x_latent[signal]
    except KeyError:
        raise KeyError(f"record has no latent value for signal {signal!r}") from None


def _feature_matrix(features, n: int) -> np.ndarray:
    """``(n, d)`` float matrix; a 1-D input is one feature, ``d = 0`` is allowed."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f.reshape(-1, 1)
    if f.ndim != 2 or f.shape[0] != n:
        raise ValueError(f"expected {n} feature rows, got shape {f.shape}")
    return f


def _train(features, targets, config: TrainConfig, link: str, signal_name: str):
    s = np.asarray(targets, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("cannot train on empty data")
    X = _feature_matrix(features, s.size)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(s))):
        raise ValueError("features and targets must be finite")

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd

    rng = np.random.default_rng(config.seed)
    w = np.zeros(Z.shape[1])
    b = 0.0
    l2 = config.l2_penalty
    history = [loss_and_grad(w, b, Z, s, link, l2)[0]]
    # overflow is reported as divergence below, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = rng.permutation(s.size)
            for start in range(0, s.size, config.batch_size):
                idx = order[start:start + config.batch_size]
                _, gw, gb = loss_and_grad(w, b, Z[idx], s[idx], link, l2)
                w = w - config.learning_rate * gw
                b = b - config.learning_rate * gb
            loss = loss_and_grad(w, b, Z, s, link, l2)[0]
            if not math.isfinite(loss) or not np.all(np.isfinite(w)):
                raise TrainingDivergedError(f"training loss became non-finite at epoch {epoch}")
            history.append(loss)
    weights = w / sd
    return PredictorModel(weights, b - mu @ weights, link, signal_name, history)


def train_regressor(features, targets, config: TrainConfig = TrainConfig(),
                    signal_name: str = "x") -> PredictorModel:
    """Identity-link model minimizing squared error plus an L2 penalty.

    Training runs on standardized features, so ``l2_penalty`` shrinks the
    weights of the standardized problem; the returned model is mapped back to
    raw feature units.
    """
    return _train(features, targets, config, "identity", signal_name)


def train_classifier(features, labels, config: TrainConfig = TrainConfig(),
                     signal_name: str = "x") -> PredictorModel:
    """Logistic model minimizing binary cross-entropy plus an L2 penalty."""
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("classifier labels must be 0 or 1")
    return _train(features, y, config, "logistic", signal_name)


def predict(model, features):
    return model.predict(features)
