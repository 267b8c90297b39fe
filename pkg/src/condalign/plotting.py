"""Report figures: per-bucket distributions before and after alignment."""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

REPORT_RC = {
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 0.9,
    "svg.hashsalt": "condalign",
}

# PNG metadata carries a software version string by default; drop it so
# figures are byte-stable across matplotlib patch releases.
PNG_METADATA = {"Software": None}


@contextmanager
def report_style():
    with matplotlib.rc_context(REPORT_RC):
        yield


def _ecdf(values):
    v = np.sort(values)
    return v, (np.arange(1, v.size + 1) - 0.5) / v.size


def _save(fig, path: Path) -> Path:
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_bucket_cdfs(x, z, keys, signal: str, method: str, path, max_buckets: int = 20) -> Path:
    """Per-bucket empirical CDFs of the raw prediction (left) and aligned score (right)."""
    keys = np.asarray(keys)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    counts = np.bincount(inv)
    shown = np.argsort(-counts, kind="stable")[:max_buckets]
    cmap = plt.get_cmap("viridis", max(len(shown), 2))
    with report_style():
        fig, (ax_raw, ax_z) = plt.subplots(1, 2, figsize=(9, 3.6))
        for c, i in enumerate(sorted(shown)):
            mask = inv == i
            label = ":".join(str(int(v)) for v in uniq[i])
            if x is not None:
                ax_raw.plot(*_ecdf(x[mask]), color=cmap(c), label=label)
            ax_z.plot(*_ecdf(z[mask]), color=cmap(c))
        if x is not None and np.all(np.asarray(x) > 0) and np.ptp(np.log10(x)) > 2:
            ax_raw.set_xscale("log")
        ax_raw.set_title(f"{signal}: predicted behavior by bucket")
        ax_raw.set_xlabel("x")
        ax_raw.set_ylabel("empirical CDF")
        ax_z.set_title(f"{signal}: {method}-aligned score by bucket")
        ax_z.set_xlabel("z")
        if x is not None:
            ax_raw.legend(ncol=2, frameon=False, title="bucket")
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_mi_summary(report, path) -> Path:
    """Bar chart of MI before and after alignment against the permutation floor."""
    names = sorted(report.signals) + ["z_final"]
    entries = [report.signals[n] for n in sorted(report.signals)] + [report.fused]
    before = [e.mi_before.nats if e.mi_before is not None else np.nan for e in entries]
    after = [e.mi_after.nats for e in entries]
    floor = [e.mi_after.noise_floor_nats for e in entries]
    pos = np.arange(len(names))
    with report_style():
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        ax.bar(pos - 0.2, before, width=0.4, label="raw prediction", color="0.6")
        ax.bar(pos + 0.2, after, width=0.4, label="aligned score", color="tab:blue")
        ax.scatter(pos + 0.2, floor, marker="_", s=300, color="black", label="permutation floor",
                   zorder=3)
        ax.set_yscale("symlog", linthresh=1e-4)
        ax.set_xticks(pos, names)
        ax.set_ylabel("MI with bias key (nats)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def render_report_figures(report, table, keys, signals: dict, out_dir) -> list[Path]:
    """Write every report figure into ``out_dir``; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [plot_mi_summary(report, out / "mi_summary.png")]
    for name, method in sorted(signals.items()):
        x = table.get(f"x:{name}")
        paths.append(plot_bucket_cdfs(None if x is None else np.asarray(x, dtype=float),
                                      np.asarray(table[f"z:{name}"], dtype=float), keys,
                                      name, method, out / f"{name}_bucket_cdfs.png"))
    return paths
