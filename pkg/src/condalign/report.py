"""Experiment report: structured document plus a flat metric table."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .conddist import FORMAT_VERSION
from .metrics import BucketStat, KsResult, MiEstimate

CSV_COLUMNS = ("metric", "signal", "method", "bucket", "value")
UNAVAILABLE = "unavailable"


def bucket_label(key) -> str:
    return ":".join(str(int(i)) for i in key)


@dataclass
class SignalReport:
    method: str
    mi_after: MiEstimate
    mi_before: MiEstimate | None = None
    ks_global: KsResult | None = None
    ks_buckets: dict = field(default_factory=dict)
    spearman_before: float | None = None
    spearman_after: float | None = None
    bucket_stats: dict = field(default_factory=dict)
    target: str = "uniform01"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "target": self.target,
            "mi_before": None if self.mi_before is None else self.mi_before.to_dict(),
            "mi_after": self.mi_after.to_dict(),
            "ks_global": None if self.ks_global is None else self.ks_global.to_dict(),
            "ks_buckets": {bucket_label(k): v.to_dict() for k, v in self.ks_buckets.items()},
            "spearman_before": self.spearman_before,
            "spearman_after": self.spearman_after,
            "bucket_stats": {bucket_label(k): {"count": s.count, "mean": s.mean, "std": s.std}
                             for k, s in self.bucket_stats.items()},
        }

    def rows(self, signal: str):
        m = self.method

        def row(metric, value, bucket=""):
            return (metric, signal, m, bucket, UNAVAILABLE if value is None else value)

        if self.mi_before is not None:
            yield row("mi_before_nats", self.mi_before.nats)
            yield row("mi_before_noise_floor_nats", self.mi_before.noise_floor_nats)
        yield row("mi_after_nats", self.mi_after.nats)
        yield row("mi_after_noise_floor_nats", self.mi_after.noise_floor_nats)
        if self.ks_global is not None:
            yield row("ks_global", self.ks_global.d_statistic)
        for k, v in self.ks_buckets.items():
            yield row("ks_bucket", v.d_statistic, bucket_label(k))
        yield row("spearman_before", self.spearman_before)
        yield row("spearman_after", self.spearman_after)
        for k, s in self.bucket_stats.items():
            label = bucket_label(k)
            yield row("bucket_count", s.count, label)
            yield row("bucket_mean", s.mean, label)
            yield row("bucket_std", s.std, label)


@dataclass
class ExperimentReport:
    seed: int
    config_fingerprint: str
    data_fingerprint: str
    model_fingerprint: str | None
    signals: dict
    fused: SignalReport
    recovery_available: bool
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "experiment_report",
            "seed": self.seed,
            "lineage": {"config_fingerprint": self.config_fingerprint,
                        "data_fingerprint": self.data_fingerprint,
                        "model_fingerprint": self.model_fingerprint},
            "recovery_metrics": "available" if self.recovery_available else UNAVAILABLE,
            "signals": {n: r.to_dict() for n, r in sorted(self.signals.items())},
            "fused": self.fused.to_dict(),
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_rows(self) -> list[tuple]:
        rows = []
        for name, r in sorted(self.signals.items()):
            rows.extend(r.rows(name))
        rows.extend(self.fused.rows("z_final"))
        return rows

    def write(self, json_path, csv_path) -> None:
        Path(json_path).write_text(self.to_json())
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for metric, signal, method, bucket, value in self.csv_rows():
                writer.writerow([metric, signal, method, bucket,
                                 repr(value) if isinstance(value, float) else value])


def bucket_stat_from_dict(d: dict) -> BucketStat:
    return BucketStat(d["count"], d["mean"], d["std"])
