"""PNG figures for the report command."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .room import BUCKET_NAMES  # noqa: E402

_PNG_META = {"Software": None}  # keeps repeated renders byte-stable


def _columns(reports):
    seen = []
    for r in reports:
        seen += [c for c in r.columns() if c not in seen]
    return [b for b in BUCKET_NAMES if b in seen] + [c for c in seen if c not in BUCKET_NAMES] + ["AVG"]


def plot_buckets(reports, path, metric: str = "si_snr") -> Path:
    """Grouped bars: one group per angle bucket plus AVG, one bar per system."""
    reports = list(reports)
    cols = _columns(reports)
    x = np.arange(len(cols))
    width = 0.8 / max(len(reports), 1)
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(cols), 3.6))
    for k, rep in enumerate(reports):
        vals = []
        for c in cols:
            st = rep.avg if c == "AVG" else rep.buckets.get(c)
            vals.append(np.nan if st is None else getattr(st, metric))
        ax.bar(x - 0.4 + width * (k + 0.5), vals, width, label=rep.label or f"system {k + 1}")
    ax.axhline(0.0, color="0.3", lw=0.6)
    ax.set_xticks(x, cols)
    ax.set_xlabel("azimuth difference (deg)")
    ax.set_ylabel({"si_snr": "Si-SNR (dB)", "sdr": "SDR (dB)"}.get(metric, metric))
    ax.legend(fontsize=7, frameon=False, ncol=2)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_curves(curves: dict, path) -> Path:
    """Training loss against step, one line per model."""
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for name, curve in sorted(curves.items()):
        steps = [c[0] for c in curve]
        ax.plot(steps, [c[1] for c in curve], lw=0.8, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    if curves:
        ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path
