"""Experiment configuration document (JSON) and seed derivation."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .align import METHODS, TIE_MODES, FusionWeights, TargetDistribution
from .behavior import TrainConfig
from .conddist import (
    DEFAULT_GRID_SIZE,
    DEFAULT_MIN_BUCKET_COUNT,
    DEFAULT_SHRINKAGE,
    FAMILIES,
    TRANSFORM_SPACES,
    BiasSpec,
    SpecError,
    content_hash,
)
from .quantreg import QuantileRegConfig
from .simulator import SIGNAL_KINDS, SignalSpec, SimConfig, SimConfigError

ESTIMATORS = ("empirical", "parametric", "quantreg")
DEFAULT_TAU_LEVELS = tuple(round(0.05 * i, 2) for i in range(1, 20))


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


def derive_seed(master: int, stage: str) -> int:
    """Stable 63-bit seed for a named stage, derived from the master seed."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stage.encode())])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def _section(d: Mapping, key: str, path: str) -> dict:
    value = d.get(key, {})
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"{path}{key}: expected an object")
    return dict(value)


def _check_keys(d: Mapping, allowed: set, path: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"{path}: unknown field(s) {extra}")


def _number(d: Mapping, key: str, default, path: str, *, integer=False, minimum=None,
            strict=False):
    value = d.get(key, default)
    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if ok and integer:
        ok = float(value).is_integer()
    if not ok:
        kind = "an integer" if integer else "a number"
        raise ConfigError(f"{path}.{key}: expected {kind}, got {value!r}")
    value = int(value) if integer else float(value)
    if minimum is not None and (value <= minimum if strict else value < minimum):
        raise ConfigError(f"{path}.{key}: must be {'>' if strict else '>='} {minimum}, got {value}")
    return value


def _choice(d: Mapping, key: str, default, choices, path: str):
    value = d.get(key, default)
    if value not in choices:
        raise ConfigError(f"{path}.{key}: expected one of {list(choices)}, got {value!r}")
    return value


@dataclass(frozen=True)
class SignalConfig:
    name: str
    kind: str


@dataclass(frozen=True)
class PredictorConfig:
    kind: str = "oracle"
    train: TrainConfig = TrainConfig()
    use_bias_features: bool = True

    def to_dict(self) -> dict:
        if self.kind == "oracle":
            return {"kind": "oracle"}
        return {"kind": "trained", "train": self.train.to_dict(),
                "use_bias_features": self.use_bias_features}


@dataclass(frozen=True)
class ConddistConfig:
    estimator: str = "empirical"
    grid_size: int = DEFAULT_GRID_SIZE
    min_bucket_count: int = DEFAULT_MIN_BUCKET_COUNT
    shrinkage_strength: float = DEFAULT_SHRINKAGE
    transform_space: str = "identity"
    family: str = "gaussian"
    tau_levels: tuple = DEFAULT_TAU_LEVELS
    quantreg: QuantileRegConfig = QuantileRegConfig()

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "grid_size": self.grid_size,
                "min_bucket_count": self.min_bucket_count,
                "shrinkage_strength": self.shrinkage_strength,
                "transform_space": self.transform_space, "family": self.family,
                "tau_levels": list(self.tau_levels),
                "quantreg": {"learning_rate": self.quantreg.learning_rate,
                             "epochs": self.quantreg.epochs,
                             "batch_size": self.quantreg.batch_size}}


@dataclass(frozen=True)
class AlignmentConfig:
    method: str = "quantile"
    target: TargetDistribution = TargetDistribution()

    def to_dict(self) -> dict:
        return {"method": self.method, "target": self.target.to_dict()}


@dataclass(frozen=True)
class EvaluationConfig:
    mi_bins: int = 16
    mi_permutations: int = 5
    mi_floor_multiple: float = 2.0
    ks_bucket_threshold: float = 0.02
    ks_global_threshold: float = 0.005
    ks_min_bucket_n: int = 1000
    figures: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SimulatorSection:
    n_records: int
    signals: tuple
    bucket_probabilities: tuple = ()
    n_features: int = 4
    feature_noise: float = 1.0

    def to_dict(self) -> dict:
        return {"n_records": self.n_records,
                "bucket_probabilities": [list(p) for p in self.bucket_probabilities],
                "n_features": self.n_features, "feature_noise": self.feature_noise,
                "signals": {s.name: s.to_dict() for s in self.signals}}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    bias: BiasSpec
    signals: tuple
    simulator: SimulatorSection | None = None
    predictor: Mapping = field(default_factory=dict)
    conddist: ConddistConfig = ConddistConfig()
    conddist_per_signal: Mapping = field(default_factory=dict)
    alignment: Mapping = field(default_factory=dict)
    tie_mode: str = "deterministic"
    fusion: FusionWeights | None = None
    evaluation: EvaluationConfig = EvaluationConfig()
    output_dir: str = "runs/default"

    @property
    def signal_names(self) -> list[str]:
        return [s.name for s in self.signals]

    def signal_kind(self, name: str) -> str:
        return next(s.kind for s in self.signals if s.name == name)

    def conddist_for(self, name: str) -> ConddistConfig:
        return self.conddist_per_signal.get(name, self.conddist)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    def sim_config(self) -> SimConfig:
        if self.simulator is None:
            raise ConfigError("simulator: section is required to simulate data")
        s = self.simulator
        return SimConfig(s.n_records, derive_seed(self.seed, "simulate"), self.bias, s.signals,
                         s.bucket_probabilities, s.n_features, s.feature_noise)

    # -- text form ----------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "bias": self.bias.to_dict(),
            "signals": [{"name": s.name, "kind": s.kind} for s in self.signals],
            "predictor": {n: p.to_dict() for n, p in self.predictor.items()},
            "conddist": {**self.conddist.to_dict(),
                         "per_signal": {n: c.to_dict()
                                        for n, c in self.conddist_per_signal.items()}},
            "alignment": {"tie_mode": self.tie_mode,
                          "signals": {n: a.to_dict() for n, a in self.alignment.items()}},
            "fusion": {"weights": dict(self.fusion.weights)},
            "evaluation": self.evaluation.to_dict(),
            "output": {"dir": self.output_dir},
        }
        if self.simulator is not None:
            d["simulator"] = self.simulator.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def fingerprint(self) -> str:
        """Content hash of everything except the master seed and output location."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("output")
        return content_hash(d)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        return _parse(d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return _parse(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path} ({exc.strerror})") from None
        return cls.from_json(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def _parse_conddist(d: Mapping, path: str, base: ConddistConfig) -> ConddistConfig:
    _check_keys(d, {"estimator", "grid_size", "min_bucket_count", "shrinkage_strength",
                    "transform_space", "family", "tau_levels", "quantreg", "per_signal"}, path)
    qr = _section(d, "quantreg", path + ".")
    _check_keys(qr, {"learning_rate", "epochs", "batch_size"}, path + ".quantreg")
    taus = tuple(float(t) for t in d.get("tau_levels", base.tau_levels))
    if not taus or any(not 0 < t < 1 for t in taus) or any(b <= a for a, b in zip(taus, taus[1:])):
        raise ConfigError(f"{path}.tau_levels: must be strictly increasing inside (0, 1)")
    return ConddistConfig(
        estimator=_choice(d, "estimator", base.estimator, ESTIMATORS, path),
        grid_size=_number(d, "grid_size", base.grid_size, path, integer=True, minimum=1),
        min_bucket_count=_number(d, "min_bucket_count", base.min_bucket_count, path,
                                 integer=True, minimum=1),
        shrinkage_strength=_number(d, "shrinkage_strength", base.shrinkage_strength, path,
                                   minimum=0),
        transform_space=_choice(d, "transform_space", base.transform_space, TRANSFORM_SPACES,
                                path),
        family=_choice(d, "family", base.family, FAMILIES, path),
        tau_levels=taus,
        quantreg=QuantileRegConfig(
            learning_rate=_number(qr, "learning_rate", base.quantreg.learning_rate,
                                  path + ".quantreg", minimum=0, strict=True),
            epochs=_number(qr, "epochs", base.quantreg.epochs, path + ".quantreg",
                           integer=True, minimum=1),
            batch_size=_number(qr, "batch_size", base.quantreg.batch_size, path + ".quantreg",
                               integer=True, minimum=1)),
    )


def _parse(d: Mapping) -> ExperimentConfig:
    if not isinstance(d, Mapping):
        raise ConfigError("config: expected a JSON object")
    _check_keys(d, {"seed", "bias", "signals", "simulator", "predictor", "conddist",
                    "alignment", "fusion", "evaluation", "output"}, "config")
    seed = _number(d, "seed", 0, "config", integer=True, minimum=0)

    try:
        bias = BiasSpec.from_dict(_section(d, "bias", ""))
    except (SpecError, KeyError, TypeError) as exc:
        raise ConfigError(f"bias: {exc}") from None

    raw_signals = d.get("signals")
    if not isinstance(raw_signals, list) or not raw_signals:
        raise ConfigError("signals: expected a non-empty list of {name, kind}")
    signals = []
    for i, s in enumerate(raw_signals):
        if not isinstance(s, Mapping) or not isinstance(s.get("name"), str):
            raise ConfigError(f"signals[{i}]: expected an object with a string name")
        signals.append(SignalConfig(s["name"], _choice(s, "kind", "continuous", SIGNAL_KINDS,
                                                       f"signals[{i}]")))
    names = [s.name for s in signals]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"signals: defined more than once: {dupes}")
    kinds = {s.name: s.kind for s in signals}

    def known(section: Mapping, path: str):
        unknown = sorted(set(section) - set(names))
        if unknown:
            raise ConfigError(f"{path}: references undefined signal(s) {unknown}")

    simulator = None
    if "simulator" in d and d["simulator"] is not None:
        sim = _section(d, "simulator", "")
        _check_keys(sim, {"n_records", "bucket_probabilities", "n_features", "feature_noise",
                          "signals"}, "simulator")
        gen = _section(sim, "signals", "simulator.")
        known(gen, "simulator.signals")
        missing = [n for n in names if n not in gen]
        if missing:
            raise ConfigError(f"simulator.signals: no generative parameters for {missing}")
        specs = []
        for n in names:
            entry = dict(gen[n])
            entry.setdefault("kind", kinds[n])
            if entry["kind"] != kinds[n]:
                raise ConfigError(f"simulator.signals.{n}.kind: {entry['kind']!r} contradicts "
                                  f"signals entry {kinds[n]!r}")
            try:
                specs.append(SignalSpec.from_dict(n, entry))
            except (SimConfigError, TypeError, ValueError) as exc:
                raise ConfigError(f"simulator.signals.{n}: {exc}") from None
        simulator = SimulatorSection(
            n_records=_number(sim, "n_records", None, "simulator", integer=True, minimum=1),
            signals=tuple(specs),
            bucket_probabilities=tuple(tuple(float(v) for v in p)
                                       for p in sim.get("bucket_probabilities", ())),
            n_features=_number(sim, "n_features", 4, "simulator", integer=True, minimum=0),
            feature_noise=_number(sim, "feature_noise", 1.0, "simulator", minimum=0),
        )
        try:
            SimConfig(simulator.n_records, 0, bias, simulator.signals,
                      simulator.bucket_probabilities, simulator.n_features,
                      simulator.feature_noise)
        except (SimConfigError, SpecError) as exc:
            raise ConfigError(f"simulator: {exc}") from None

    pred_section = _section(d, "predictor", "")
    known(pred_section, "predictor")
    predictor = {}
    for n in names:
        p = dict(pred_section.get(n) or {"kind": "oracle"})
        path = f"predictor.{n}"
        _check_keys(p, {"kind", "train", "use_bias_features"}, path)
        kind = _choice(p, "kind", "oracle", ("oracle", "trained"), path)
        t = _section(p, "train", path + ".")
        _check_keys(t, {"learning_rate", "epochs", "batch_size", "seed", "l2_penalty"},
                    path + ".train")
        base = TrainConfig()
        train = TrainConfig(
            learning_rate=_number(t, "learning_rate", base.learning_rate, path + ".train",
                                  minimum=0, strict=True),
            epochs=_number(t, "epochs", base.epochs, path + ".train", integer=True, minimum=1),
            batch_size=_number(t, "batch_size", base.batch_size, path + ".train", integer=True,
                               minimum=1),
            seed=_number(t, "seed", base.seed, path + ".train", integer=True, minimum=0),
            l2_penalty=_number(t, "l2_penalty", base.l2_penalty, path + ".train", minimum=0))
        use_bias = p.get("use_bias_features", True)
        if not isinstance(use_bias, bool):
            raise ConfigError(f"{path}.use_bias_features: expected true or false")
        predictor[n] = PredictorConfig(kind, train, use_bias)

    cd = _section(d, "conddist", "")
    conddist = _parse_conddist(cd, "conddist", ConddistConfig())
    per_signal_raw = _section(cd, "per_signal", "conddist.")
    known(per_signal_raw, "conddist.per_signal")
    per_signal = {}
    for n, entry in per_signal_raw.items():
        if not isinstance(entry, Mapping):
            raise ConfigError(f"conddist.per_signal.{n}: expected an object")
        per_signal[n] = _parse_conddist(entry, f"conddist.per_signal.{n}", conddist)

    al = _section(d, "alignment", "")
    _check_keys(al, {"tie_mode", "signals"}, "alignment")
    tie_mode = _choice(al, "tie_mode", "deterministic", TIE_MODES, "alignment")
    al_signals = _section(al, "signals", "alignment.")
    known(al_signals, "alignment.signals")
    alignment = {}
    for n in names:
        a = dict(al_signals.get(n) or {})
        path = f"alignment.signals.{n}"
        _check_keys(a, {"method", "target"}, path)
        method = _choice(a, "method", "quantile", METHODS, path)
        try:
            target = TargetDistribution.from_dict(a.get("target"))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}.target: {exc}") from None
        alignment[n] = AlignmentConfig(method, target)

    fu = _section(d, "fusion", "")
    _check_keys(fu, {"weights"}, "fusion")
    raw_weights = _section(fu, "weights", "fusion.") or {n: 1.0 for n in names}
    known(raw_weights, "fusion.weights")
    for n, w in raw_weights.items():
        _number(raw_weights, n, None, "fusion.weights")
    try:
        fusion = FusionWeights(raw_weights)
    except ValueError as exc:
        raise ConfigError(f"fusion.weights: {exc}") from None

    ev = _section(d, "evaluation", "")
    base_ev = EvaluationConfig()
    _check_keys(ev, set(base_ev.to_dict()), "evaluation")
    figures = ev.get("figures", True)
    if not isinstance(figures, bool):
        raise ConfigError("evaluation.figures: expected true or false")
    evaluation = EvaluationConfig(
        mi_bins=_number(ev, "mi_bins", base_ev.mi_bins, "evaluation", integer=True, minimum=2),
        mi_permutations=_number(ev, "mi_permutations", base_ev.mi_permutations, "evaluation",
                                integer=True, minimum=1),
        mi_floor_multiple=_number(ev, "mi_floor_multiple", base_ev.mi_floor_multiple,
                                  "evaluation", minimum=0, strict=True),
        ks_bucket_threshold=_number(ev, "ks_bucket_threshold", base_ev.ks_bucket_threshold,
                                    "evaluation", minimum=0),
        ks_global_threshold=_number(ev, "ks_global_threshold", base_ev.ks_global_threshold,
                                    "evaluation", minimum=0),
        ks_min_bucket_n=_number(ev, "ks_min_bucket_n", base_ev.ks_min_bucket_n, "evaluation",
                                integer=True, minimum=1),
        figures=figures)

    out = _section(d, "output", "")
    _check_keys(out, {"dir"}, "output")
    output_dir = out.get("dir", "runs/default")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output.dir: expected a non-empty path string")

    return ExperimentConfig(seed, bias, tuple(signals), simulator, predictor, conddist,
                            per_signal, alignment, tie_mode, fusion, evaluation, output_dir)


DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 20250101,
    "bias": {"dimensions": [
        {"name": "category", "kind": "categorical", "cardinality": 4},
        {"name": "duration", "kind": "continuous", "boundaries": [20.0, 40.0, 60.0, 80.0]},
    ]},
    "signals": [{"name": "watch", "kind": "continuous"}, {"name": "like", "kind": "binary"}],
    "simulator": {
        "n_records": 200000,
        "bucket_probabilities": [[0.4, 0.3, 0.2, 0.1], [0.15, 0.25, 0.3, 0.2, 0.1]],
        "n_features": 4,
        "feature_noise": 1.0,
        "signals": {
            "watch": {"kind": "continuous", "base_location": 3.0, "base_scale": 0.7,
                      "effects": [[0.0, 0.4, -0.3, 0.8], [-0.6, -0.2, 0.2, 0.6, 1.0]],
                      "scale_factors": [[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.1, 1.2, 1.3]],
                      "observation_noise": 0.3},
            "like": {"kind": "binary", "base_location": -1.0, "slope": 1.0,
                     "effects": [[0.0, 0.5, -0.5, 0.3], [0.4, 0.2, 0.0, -0.2, -0.4]]},
        },
    },
    "predictor": {"watch": {"kind": "oracle"}, "like": {"kind": "oracle"}},
    "conddist": {"estimator": "empirical", "grid_size": 1024, "min_bucket_count": 100,
                 "shrinkage_strength": 0.0, "transform_space": "identity"},
    "alignment": {"tie_mode": "deterministic",
                  "signals": {"watch": {"method": "quantile", "target": {"kind": "uniform01"}},
                              "like": {"method": "quantile", "target": {"kind": "uniform01"}}}},
    "fusion": {"weights": {"watch": 0.5, "like": 0.5}},
    "evaluation": {"mi_bins": 16, "mi_permutations": 5, "ks_bucket_threshold": 0.02,
                   "ks_global_threshold": 0.005, "ks_min_bucket_n": 1000},
    "output": {"dir": "runs/default"},
}


def default_config() -> ExperimentConfig:
    """The default two-dimension, two-signal, 200k-record scenario."""
    return ExperimentConfig.from_dict(json.loads(json.dumps(DEFAULT_CONFIG)))
