"""Synthetic logs from the interest/bias causal graph, with known ground truth.

True interest ``z`` and the bias buckets ``y`` are drawn independently.  Each
signal's latent behavior is the ``z``-quantile of a bucket-specific law:

* continuous: ``x = exp(mu(y) + sigma(y) * ndtri(z))`` (lognormal), observed
  as ``s = x * exp(noise * eps)``;
* binary: ``x = ndtr(a(y) + b * ndtri(z))``, observed as ``s ~ Bernoulli(x)``.

Because ``x`` is exactly the conditional ``z``-quantile, the true conditional
CDF maps it back to ``z``.  That is the reference every alignment test uses.
Bucket parameters are additive per-dimension effects (log-multiplicative for
the lognormal scale), with optional per-combination overrides.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import special

from .conddist import BiasKey, BiasSpec, Categorical, SpecError, discretize_many
from .tableio import columns_with_prefix, read_table, write_table

SIGNAL_KINDS = ("continuous", "binary")


class SimConfigError(ValueError):
    pass


def _key_from_text(text: str) -> BiasKey:
    return tuple(int(p) for p in str(text).replace("(", "").replace(")", "").split(",") if p.strip())


@dataclass(frozen=True)
class SignalSpec:
    """Generative parameters of one simulated signal.

    ``effects`` holds one list of per-bucket offsets per bias dimension
    (location for continuous signals, probit intercept for binary ones).
    ``scale_factors`` multiplies ``base_scale`` per dimension.
    ``overrides`` maps ``"i,j"`` keys to ``[location, scale]`` or ``[intercept]``.
    """

    name: str
    kind: str
    base_location: float = 0.0
    base_scale: float = 1.0
    effects: tuple = ()
    scale_factors: tuple = ()
    slope: float = 1.0
    observation_noise: float = 0.0
    overrides: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise SimConfigError(f"signal {self.name!r}: kind must be one of {SIGNAL_KINDS}")
        object.__setattr__(self, "effects", tuple(tuple(map(float, e)) for e in self.effects))
        object.__setattr__(self, "scale_factors",
                           tuple(tuple(map(float, e)) for e in self.scale_factors))
        object.__setattr__(self, "overrides",
                           {str(k): tuple(map(float, v)) for k, v in dict(self.overrides).items()})
        if self.kind == "continuous" and not self.base_scale > 0:
            raise SimConfigError(f"signal {self.name!r}: base_scale must be > 0")
        if self.kind == "binary" and not self.slope >= 0:
            raise SimConfigError(f"signal {self.name!r}: slope must be >= 0")
        if not self.observation_noise >= 0:
            raise SimConfigError(f"signal {self.name!r}: observation_noise must be >= 0")

    def parameter_tables(self, spec: BiasSpec) -> tuple[np.ndarray, np.ndarray]:
        """Per-combination ``(location, scale)`` arrays of shape ``spec.shape``.

        For binary signals the first table is the probit intercept ``a(y)`` and
        the second is filled with the global slope.
        """
        shape = spec.shape
        loc = np.full(shape, float(self.base_location))
        scale = np.full(shape, float(self.base_scale) if self.kind == "continuous" else self.slope)
        for table, entries, combine in ((loc, self.effects, np.add),
                                        (scale, self.scale_factors, np.multiply)):
            if entries and len(entries) != spec.n_dims:
                raise SimConfigError(
                    f"signal {self.name!r}: expected {spec.n_dims} effect lists, got {len(entries)}")
            if self.kind == "binary" and combine is np.multiply and entries:
                raise SimConfigError(f"signal {self.name!r}: binary signals take no scale_factors")
            for d, eff in enumerate(entries):
                if len(eff) != shape[d]:
                    raise SimConfigError(
                        f"signal {self.name!r}: dimension {spec.names[d]!r} needs "
                        f"{shape[d]} effects, got {len(eff)}")
                view = [1] * len(shape)
                view[d] = shape[d]
                combine(table, np.asarray(eff).reshape(view), out=table)
        for text, values in self.overrides.items():
            key = spec.validate_keys([_key_from_text(text)])[0]
            loc[tuple(key)] = values[0]
            if self.kind == "continuous" and len(values) > 1:
                scale[tuple(key)] = values[1]
        if self.kind == "continuous" and not np.all(scale > 0):
            raise SimConfigError(f"signal {self.name!r}: every bucket scale must be > 0")
        return loc, scale

    def latent(self, z: np.ndarray, flat_keys: np.ndarray, spec: BiasSpec) -> np.ndarray:
        loc, scale = (t.ravel() for t in self.parameter_tables(spec))
        q = special.ndtri(z)
        if self.kind == "continuous":
            return np.exp(loc[flat_keys] + scale[flat_keys] * q)
        return special.ndtr(loc[flat_keys] + self.slope * q)

    def true_cdf(self, x: np.ndarray, flat_keys: np.ndarray, spec: BiasSpec) -> np.ndarray:
        """The exact conditional CDF of the latent behavior."""
        loc, scale = (t.ravel() for t in self.parameter_tables(spec))
        if self.kind == "continuous":
            return special.ndtr((np.log(x) - loc[flat_keys]) / scale[flat_keys])
        return special.ndtr((special.ndtri(x) - loc[flat_keys]) / self.slope)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "base_location": self.base_location,
             "effects": [list(e) for e in self.effects],
             "observation_noise": self.observation_noise,
             "overrides": {k: list(v) for k, v in self.overrides.items()}}
        if self.kind == "continuous":
            d.update(base_scale=self.base_scale, scale_factors=[list(e) for e in self.scale_factors])
        else:
            d["slope"] = self.slope
        return d

    @classmethod
    def from_dict(cls, name: str, d: Mapping) -> "SignalSpec":
        known = {"kind", "base_location", "base_scale", "effects", "scale_factors", "slope",
                 "observation_noise", "overrides"}
        extra = set(d) - known
        if extra:
            raise SimConfigError(f"signal {name!r}: unknown fields {sorted(extra)}")
        return cls(name=name, kind=d.get("kind", "continuous"),
                   base_location=float(d.get("base_location", 0.0)),
                   base_scale=float(d.get("base_scale", 1.0)),
                   effects=tuple(d.get("effects", ())),
                   scale_factors=tuple(d.get("scale_factors", ())),
                   slope=float(d.get("slope", 1.0)),
                   observation_noise=float(d.get("observation_noise", 0.0)),
                   overrides=dict(d.get("overrides", {})))


@dataclass(frozen=True)
class SimConfig:
    n_records: int
    seed: int
    spec: BiasSpec
    signals: tuple[SignalSpec, ...]
    bucket_probabilities: tuple = ()
    n_features: int = 4
    feature_noise: float = 1.0

    def __post_init__(self):
        if isinstance(self.n_records, bool) or int(self.n_records) != self.n_records \
                or self.n_records < 1:
            raise SimConfigError("n_records must be a positive integer")
        if self.n_features < 0 or not self.feature_noise >= 0:
            raise SimConfigError("n_features and feature_noise must be >= 0")
        names = [s.name for s in self.signals]
        if len(set(names)) != len(names):
            raise SimConfigError(f"duplicate signal names {names}")
        probs = tuple(tuple(map(float, p)) for p in self.bucket_probabilities)
        if probs and len(probs) != self.spec.n_dims:
            raise SimConfigError("bucket_probabilities needs one vector per bias dimension")
        for d, p in enumerate(probs):
            if len(p) != self.spec.shape[d]:
                raise SimConfigError(f"bucket_probabilities[{d}] needs {self.spec.shape[d]} entries")
            if min(p) < 0 or abs(sum(p) - 1.0) > 1e-9:
                raise SimConfigError(f"bucket_probabilities[{d}] must be non-negative and sum to 1")
        object.__setattr__(self, "bucket_probabilities", probs)
        for s in self.signals:
            s.parameter_tables(self.spec)

    def probabilities(self, d: int) -> np.ndarray:
        if self.bucket_probabilities:
            return np.asarray(self.bucket_probabilities[d])
        n = self.spec.shape[d]
        return np.full(n, 1.0 / n)

    def signal(self, name: str) -> SignalSpec:
        for s in self.signals:
            if s.name == name:
                return s
        raise KeyError(f"unknown signal {name!r}")


@dataclass(frozen=True)
class GroundTruthRecord:
    record_id: int
    z_true: float
    bias_values: tuple
    key: BiasKey
    features: tuple
    x_latent: dict
    s_observed: dict


@dataclass
class SimulatedData:
    """Column-oriented simulator output; iterate :meth:`records` for row views."""

    record_id: np.ndarray
    z_true: np.ndarray
    bias_values: np.ndarray
    keys: np.ndarray
    features: np.ndarray
    x_latent: dict
    s_observed: dict
    spec: BiasSpec

    def __len__(self) -> int:
        return self.z_true.size

    def records(self) -> Iterator[GroundTruthRecord]:
        for i in range(len(self)):
            yield GroundTruthRecord(
                int(self.record_id[i]), float(self.z_true[i]),
                tuple(self.bias_values[i].tolist()), tuple(int(k) for k in self.keys[i]),
                tuple(self.features[i].tolist()),
                {n: float(v[i]) for n, v in self.x_latent.items()},
                {n: (int(v[i]) if np.issubdtype(v.dtype, np.integer) else float(v[i]))
                 for n, v in self.s_observed.items()})

    def columns(self) -> dict[str, np.ndarray]:
        cols = {"record_id": self.record_id, "z_true": self.z_true}
        for j, dim in enumerate(self.spec.dimensions):
            v = self.bias_values[:, j]
            cols[f"bias:{dim.name}"] = v.astype(np.int64) if isinstance(dim, Categorical) else v
        for k in range(self.features.shape[1]):
            cols[f"feat:{k}"] = self.features[:, k]
        for name, v in self.x_latent.items():
            cols[f"x_true:{name}"] = v
        for name, v in self.s_observed.items():
            cols[f"s:{name}"] = v
        return cols

    @classmethod
    def from_columns(cls, cols: Mapping[str, np.ndarray], spec: BiasSpec) -> "SimulatedData":
        bias = np.column_stack([np.asarray(cols[f"bias:{n}"], dtype=np.float64)
                                for n in spec.names]) if len(cols["record_id"]) else \
            np.empty((0, spec.n_dims))
        feats = columns_with_prefix(cols, "feat:")
        n = len(cols["record_id"])
        features = np.column_stack([cols[c] for c in feats]) if feats and n else np.empty((n, len(feats)))
        x_latent = {c.split(":", 1)[1]: np.asarray(cols[c], dtype=np.float64)
                    for c in columns_with_prefix(cols, "x_true:")}
        s_obs = {c.split(":", 1)[1]: cols[c] for c in columns_with_prefix(cols, "s:")}
        return cls(np.asarray(cols["record_id"]), np.asarray(cols["z_true"], dtype=np.float64),
                   bias, discretize_many(bias, spec) if n else np.empty((0, spec.n_dims), np.int64),
                   np.asarray(features, dtype=np.float64), x_latent, s_obs, spec)


def _open_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draws on the open interval (0, 1)."""
    return (rng.integers(0, 2**53, size=n) + 0.5) / 2.0**53


def generate(config: SimConfig, shard: int | None = None) -> SimulatedData:
    """Draw ``config.n_records`` records.

    With ``shard`` set, the generator seed is derived from ``(seed, shard)``
    and record ids are offset by ``shard * n_records``, so shards produced in
    any order concatenate into a reproducible dataset.
    """
    if shard is None:
        rng = np.random.default_rng(config.seed)
        offset = 0
    else:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(int(shard),)))
        offset = int(shard) * config.n_records
    spec = config.spec
    n = config.n_records
    z = _open_unit(rng, n)

    keys = np.empty((n, spec.n_dims), dtype=np.int64)
    readings = np.empty((n, spec.n_dims))
    for d, dim in enumerate(spec.dimensions):
        keys[:, d] = rng.choice(dim.n_buckets, size=n, p=config.probabilities(d))
        if isinstance(dim, Categorical):
            readings[:, d] = keys[:, d]
        else:
            ranges = np.array([dim.bucket_range(i) for i in range(dim.n_buckets)])
            lo, hi = ranges[keys[:, d], 0], ranges[keys[:, d], 1]
            readings[:, d] = np.minimum(lo + (hi - lo) * rng.random(n), np.nextafter(hi, -np.inf))

    q = special.ndtri(z)
    features = q[:, None] + config.feature_noise * rng.standard_normal((n, config.n_features))

    flat = np.ravel_multi_index(keys.T, spec.shape)
    x_latent, s_observed = {}, {}
    for sig in config.signals:
        x = sig.latent(z, flat, spec)
        if sig.kind == "continuous":
            s = x * np.exp(sig.observation_noise * rng.standard_normal(n))
        else:
            s = (rng.random(n) < x).astype(np.int64)
        x_latent[sig.name] = x
        s_observed[sig.name] = s
    return SimulatedData(np.arange(offset, offset + n, dtype=np.int64), z, readings, keys,
                         features, x_latent, s_observed, spec)


def export(data: SimulatedData, path, delimiter: str = ",") -> int:
    """Write records as a delimited table; returns the number of data rows."""
    return write_table(path, data.columns(), delimiter=delimiter)


def load(path, spec: BiasSpec, delimiter: str = ",") -> SimulatedData:
    """Re-import a table written by :func:`export`."""
    cols = read_table(path, delimiter=delimiter)
    missing = [c for c in ["record_id", "z_true"] + [f"bias:{n}" for n in spec.names]
               if c not in cols]
    if missing:
        raise SpecError(f"{path}: missing columns {missing}")
    return SimulatedData.from_columns(cols, spec)


def concat(parts: Sequence[SimulatedData]) -> SimulatedData:
    parts = sorted(parts, key=lambda p: int(p.record_id[0]) if len(p) else 0)
    names = list(parts[0].x_latent)
    return SimulatedData(
        np.concatenate([p.record_id for p in parts]),
        np.concatenate([p.z_true for p in parts]),
        np.concatenate([p.bias_values for p in parts]),
        np.concatenate([p.keys for p in parts]),
        np.concatenate([p.features for p in parts]),
        {n: np.concatenate([p.x_latent[n] for p in parts]) for n in names},
        {n: np.concatenate([p.s_observed[n] for p in parts]) for n in names},
        parts[0].spec)
