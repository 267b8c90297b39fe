"""Experiment stages: simulate, fit, transform, evaluate, and all four in sequence.

Every stage is a pure function of its config, master seed and input files, so
running the stages one by one reproduces the combined pipeline byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import simulator
from .align import score_pipeline
from .behavior import (
    OraclePredictor,
    TrainConfig,
    predictor_from_dict,
    train_classifier,
    train_regressor,
)
from .conddist import (
    FORMAT_VERSION,
    BiasSpec,
    ConditionalModel,
    ModelMismatchError,
    content_hash,
    discretize_many,
    fit_empirical,
    fit_parametric,
)
from .config import ExperimentConfig, derive_seed
from .metrics import (
    ConstantInputError,
    bucket_stats,
    ks_against_target,
    mutual_information_binned,
    rank_correlation,
)
from .quantreg import (
    QuantileRegConfig,
    QuantileRegModel,
    encode_bias_features,
    fit_quantile_regression_on_keys,
)
from .report import ExperimentReport, SignalReport, bucket_label
from .tableio import columns_with_prefix, ensure_parent, read_table, write_table

OUTPUT_PREFIXES = ("x:", "z:")


def file_fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def conditional_from_dict(d: dict):
    if d.get("kind") == "quantile_regression":
        return QuantileRegModel.from_dict(d)
    return ConditionalModel.from_dict(d)


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------


@dataclass
class SignalArtifact:
    kind: str
    predictor: object
    conditional: object
    feature_columns: list = field(default_factory=list)
    use_bias_features: bool = False

    def to_dict(self) -> dict:
        return {"kind": self.kind, "predictor": self.predictor.to_dict(),
                "feature_columns": list(self.feature_columns),
                "use_bias_features": self.use_bias_features,
                "conditional": self.conditional.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SignalArtifact":
        return cls(d["kind"], predictor_from_dict(d["predictor"]),
                   conditional_from_dict(d["conditional"]), list(d["feature_columns"]),
                   bool(d["use_bias_features"]))


@dataclass
class ModelBundle:
    """Fitted predictor and conditional model for every signal of one experiment."""

    spec: BiasSpec
    config_fingerprint: str
    seed: int
    signals: dict

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "kind": "model_bundle",
                "config_fingerprint": self.config_fingerprint, "seed": self.seed,
                "bias_spec": self.spec.to_dict(),
                "bias_spec_fingerprint": self.spec.fingerprint(),
                "signals": {n: a.to_dict() for n, a in sorted(self.signals.items())}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def fingerprint(self) -> str:
        return content_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        if d.get("kind") != "model_bundle":
            raise ValueError(f"not a model bundle (kind={d.get('kind')!r})")
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {d.get('format_version')!r}")
        spec = BiasSpec.from_dict(d["bias_spec"])
        if spec.fingerprint() != d["bias_spec_fingerprint"]:
            raise ModelMismatchError("model bundle bias spec does not match its fingerprint")
        return cls(spec, d["config_fingerprint"], d["seed"],
                   {n: SignalArtifact.from_dict(a) for n, a in d["signals"].items()})

    def save(self, path) -> None:
        ensure_parent(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ModelBundle":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read model bundle {path} ({exc.strerror})") from None
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Table helpers
# ---------------------------------------------------------------------------


def read_data(path) -> dict:
    try:
        return read_table(path)
    except OSError as exc:
        raise OSError(f"cannot read data file {path} ({exc.strerror})") from None


def table_keys(table: dict, spec: BiasSpec) -> np.ndarray:
    cols = [f"bias:{n}" for n in spec.names]
    missing = [c for c in cols if c not in table]
    if missing:
        raise ValueError(f"data is missing bias columns {missing}")
    readings = np.column_stack([np.asarray(table[c], dtype=np.float64) for c in cols])
    return discretize_many(readings, spec)


def _require(table: dict, column: str, why: str) -> np.ndarray:
    if column not in table:
        raise ValueError(f"data has no column {column!r} ({why})")
    return table[column]


def _features(table: dict, artifact: SignalArtifact, keys, spec: BiasSpec) -> np.ndarray:
    parts = [np.column_stack([_require(table, c, "predictor feature")
                              for c in artifact.feature_columns])] \
        if artifact.feature_columns else []
    if artifact.use_bias_features:
        parts.append(encode_bias_features(keys, spec))
    if not parts:
        raise ValueError("trained predictor has no input features")
    return np.hstack(parts).astype(np.float64)


def predict_signal(table: dict, name: str, artifact: SignalArtifact, keys, spec) -> np.ndarray:
    if artifact.predictor.kind == "oracle":
        return np.asarray(_require(table, f"x_true:{name}", "oracle predictor"), dtype=np.float64)
    return artifact.predictor.predict(_features(table, artifact, keys, spec))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_simulate(config: ExperimentConfig, out_path) -> int:
    data = simulator.generate(config.sim_config())
    return simulator.export(data, ensure_parent(out_path))


def _fit_conditional(config: ExperimentConfig, name: str, x, keys):
    c = config.conddist_for(name)
    common = dict(transform_space=c.transform_space, signal_name=name)
    if c.estimator == "empirical":
        return fit_empirical(x, keys, config.bias, grid_size=c.grid_size,
                             min_bucket_count=c.min_bucket_count,
                             shrinkage_strength=c.shrinkage_strength, **common)
    if c.estimator == "parametric":
        return fit_parametric(x, keys, config.bias, c.family, min_bucket_count=c.min_bucket_count,
                              shrinkage_strength=c.shrinkage_strength, **common)
    qr = QuantileRegConfig(c.quantreg.learning_rate, c.quantreg.epochs, c.quantreg.batch_size,
                           seed=derive_seed(config.seed, f"quantreg:{name}") % 2**32)
    return fit_quantile_regression_on_keys(x, keys, config.bias, c.tau_levels, qr, **common)


def run_fit(config: ExperimentConfig, data_path, model_out) -> tuple[ModelBundle, list[str]]:
    """Train or attach each signal's predictor, then fit its conditional model.

    Returns the saved bundle and human-readable summary lines: per-bucket
    counts and a warning for every bucket below ``min_bucket_count``.
    """
    table = read_data(data_path)
    spec = config.bias
    keys = table_keys(table, spec)
    n = keys.shape[0]
    if n == 0:
        raise ValueError(f"{data_path}: no data rows")
    feature_cols = sorted(columns_with_prefix(table, "feat:"), key=lambda c: int(c[5:])
                          if c[5:].isdigit() else c)
    lines = [f"fit: {n} records, {len(config.signals)} signal(s)"]
    artifacts = {}
    uniq, counts = np.unique(keys, axis=0, return_counts=True)
    bucket_counts = {tuple(int(v) for v in k): int(c) for k, c in zip(uniq, counts)}
    for sig in config.signals:
        name = sig.name
        pc = config.predictor[name]
        if pc.kind == "oracle":
            artifact = SignalArtifact(sig.kind, OraclePredictor(name), None)
            lines.append(f"[{name}] step 1 skipped (oracle predictor uses x_true:{name})")
        else:
            target = np.asarray(_require(table, f"s:{name}", "training target"), dtype=np.float64)
            artifact = SignalArtifact(sig.kind, None, None, feature_cols, pc.use_bias_features)
            train = TrainConfig(pc.train.learning_rate, pc.train.epochs, pc.train.batch_size,
                                derive_seed(config.seed, f"train:{name}:{pc.train.seed}") % 2**32,
                                pc.train.l2_penalty)
            features = _features(table, artifact, keys, spec)
            fit = train_classifier if sig.kind == "binary" else train_regressor
            artifact.predictor = fit(features, target, train, signal_name=name)
            hist = artifact.predictor.loss_history
            lines.append(f"[{name}] step 1 trained {artifact.predictor.link} predictor on "
                         f"{features.shape[1]} features: loss {hist[0]:.6g} -> {hist[-1]:.6g}")
        x = predict_signal(table, name, artifact, keys, spec)
        artifact.conditional = _fit_conditional(config, name, x, keys)
        cd = config.conddist_for(name)
        lines.append(f"[{name}] step 2 fitted {cd.estimator} conditional model "
                     f"({cd.transform_space} space)")
        for key, count in bucket_counts.items():
            lines.append(f"[{name}]   bucket {bucket_label(key)}: n={count}")
        for key in spec.all_keys():
            count = bucket_counts.get(tuple(key), 0)
            if count < cd.min_bucket_count:
                names = ", ".join(f"{d}={i}" for d, i in zip(spec.names, key))
                lines.append(f"warning: [{name}] sparse bucket {bucket_label(key)} ({names}): "
                             f"n={count} < min_bucket_count={cd.min_bucket_count}")
        artifacts[name] = artifact
    bundle = ModelBundle(spec, config.fingerprint(), config.seed, artifacts)
    bundle.save(model_out)
    lines.append(f"wrote model bundle {model_out} (fingerprint {bundle.fingerprint()[:16]})")
    return bundle, lines


def check_bundle(config: ExperimentConfig, bundle: ModelBundle) -> None:
    """Reject artifacts fitted under a different bias spec or signal set."""
    if bundle.spec.fingerprint() != config.bias.fingerprint():
        raise ModelMismatchError(
            f"model bundle bias spec {bundle.spec.fingerprint()[:16]} does not match the "
            f"config's bias spec {config.bias.fingerprint()[:16]}")
    missing = [n for n in config.signal_names if n not in bundle.signals]
    if missing:
        raise ModelMismatchError(f"model bundle has no artifacts for signal(s) {missing}")


def run_transform(config: ExperimentConfig, data_path, models_path, out_path) -> int:
    """Append ``x:<signal>``, ``z:<signal>`` and ``z_final`` to the data table."""
    bundle = ModelBundle.load(models_path)
    check_bundle(config, bundle)
    table = read_data(data_path)
    clash = [c for c in table if c.startswith(OUTPUT_PREFIXES) or c == "z_final"]
    if clash:
        raise ValueError(f"{data_path}: already contains score columns {clash}")
    spec = config.bias
    keys = table_keys(table, spec)
    names = config.signal_names
    preds = {n: predict_signal(table, n, bundle.signals[n], keys, spec) for n in names}
    scored = score_pipeline(
        preds, {n: keys for n in names}, {n: bundle.signals[n].conditional for n in names},
        {n: config.alignment[n].method for n in names},
        {n: config.alignment[n].target for n in names}, config.fusion,
        tie_mode=config.tie_mode, seed=derive_seed(config.seed, "transform"))
    out = dict(table)
    for n in names:
        out[f"x:{n}"] = preds[n]
    for n in names:
        out[f"z:{n}"] = np.asarray(scored.per_signal[n][1], dtype=np.float64)
    out["z_final"] = np.asarray(scored.z_final, dtype=np.float64)
    return write_table(ensure_parent(out_path), out)


def _spearman(a, b, what: str, warnings: list):
    try:
        return rank_correlation(a, b)
    except ConstantInputError:
        warnings.append(f"{what}: rank correlation undefined (constant input)")
        return None


def _signal_report(config, name, method, target, z, x, keys, z_true, warnings) -> SignalReport:
    ev = config.evaluation
    mi = dict(n_bins_z=ev.mi_bins, n_permutations=ev.mi_permutations)
    rep = SignalReport(method, mutual_information_binned(
        z, keys, seed=derive_seed(config.seed, f"mi:{name}:after"), **mi),
        target=target.kind if target is not None else "none")
    if x is not None:
        rep.mi_before = mutual_information_binned(
            x, keys, seed=derive_seed(config.seed, f"mi:{name}:before"), **mi)
    if rep.mi_after.nats > ev.mi_floor_multiple * rep.mi_after.noise_floor_nats:
        warnings.append(f"{name}: MI(z; key) = {rep.mi_after.nats:.3g} nats exceeds "
                        f"{ev.mi_floor_multiple:g}x the noise floor "
                        f"{rep.mi_after.noise_floor_nats:.3g}")
    if method == "quantile" and target is not None:
        rep.ks_global = ks_against_target(z, target, ev.ks_global_threshold)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        for i, key in enumerate(uniq):
            mask = inv == i
            if mask.sum() >= ev.ks_min_bucket_n:
                rep.ks_buckets[tuple(int(v) for v in key)] = ks_against_target(
                    z[mask], target, ev.ks_bucket_threshold)
        failed = [bucket_label(k) for k, r in rep.ks_buckets.items() if not r.passed]
        if not rep.ks_global.passed:
            warnings.append(f"{name}: global KS {rep.ks_global.d_statistic:.4g} > "
                            f"{ev.ks_global_threshold:g}")
        if failed:
            warnings.append(f"{name}: per-bucket KS above {ev.ks_bucket_threshold:g} in "
                            f"bucket(s) {failed}")
    if z_true is not None:
        rep.spearman_after = _spearman(z, z_true, f"{name} aligned", warnings)
        if x is not None:
            rep.spearman_before = _spearman(x, z_true, f"{name} raw", warnings)
    rep.bucket_stats = bucket_stats(z, keys)
    return rep


def run_evaluate(config: ExperimentConfig, scored_path, report_out, *,
                 models_path=None) -> ExperimentReport:
    """Compute the report for a scored table and write JSON, CSV and figures.

    Recovery metrics (rank correlation with ``z_true``) are reported only when
    the table carries ground truth.
    """
    table = read_data(scored_path)
    keys = table_keys(table, config.bias)
    names = config.signal_names
    needed = [f"z:{n}" for n in names] + ["z_final"]
    missing = [c for c in needed if c not in table]
    if missing:
        raise ValueError(f"{scored_path}: missing score columns {missing}")
    z_true = table.get("z_true")
    warnings = []
    if z_true is None:
        warnings.append("no z_true column: recovery metrics unavailable")
    signals = {}
    for n in names:
        a = config.alignment[n]
        signals[n] = _signal_report(
            config, n, a.method, a.target if a.method == "quantile" else None,
            np.asarray(table[f"z:{n}"], dtype=np.float64),
            None if f"x:{n}" not in table else np.asarray(table[f"x:{n}"], dtype=np.float64),
            keys, z_true, warnings)
    methods = {config.alignment[n].method for n in names
               if config.fusion.weights.get(n, 0.0) != 0}
    if len(methods) > 1:
        warnings.append("z_final fuses quantile-mapped and mean-aligned scores, which live on "
                        "different scales")
    fused = _signal_report(config, "z_final", "+".join(sorted(methods)) or "none", None,
                           np.asarray(table["z_final"], dtype=np.float64), None, keys, z_true,
                           warnings)
    report = ExperimentReport(
        seed=config.seed, config_fingerprint=config.fingerprint(),
        data_fingerprint=file_fingerprint(scored_path),
        model_fingerprint=None if models_path is None else ModelBundle.load(
            models_path).fingerprint(),
        signals=signals, fused=fused, recovery_available=z_true is not None, warnings=warnings)
    out = ensure_parent(report_out)
    report.write(out, out.with_suffix(".csv"))
    if config.evaluation.figures:
        from .plotting import render_report_figures

        render_report_figures(report, table, keys, {n: config.alignment[n].method
                                                    for n in names},
                              out.with_name(out.stem + "_figures"))
    return report


@dataclass(frozen=True)
class PipelinePaths:
    data: Path
    models: Path
    scored: Path
    report: Path

    @classmethod
    def in_dir(cls, out_dir) -> "PipelinePaths":
        d = Path(out_dir)
        return cls(d / "data.csv", d / "models.json", d / "scored.csv", d / "report.json")


def run_pipeline(config: ExperimentConfig, out_dir=None) -> tuple[ExperimentReport, list[str]]:
    """Simulate, fit, transform and evaluate into one output directory."""
    out = Path(out_dir if out_dir is not None else config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out} ({exc.strerror})") from None
    paths = PipelinePaths.in_dir(out)
    lines = [f"simulate: wrote {run_simulate(config, paths.data)} rows to {paths.data}"]
    lines += run_fit(config, paths.data, paths.models)[1]
    lines.append(f"transform: wrote {run_transform(config, paths.data, paths.models, paths.scored)}"
                 f" rows to {paths.scored}")
    report = run_evaluate(config, paths.scored, paths.report, models_path=paths.models)
    lines.append(f"evaluate: wrote {paths.report}")
    return report, lines
