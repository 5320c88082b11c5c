"""Figure rendering for evaluation reports (files only, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_LABELS = {"psnr": "PSNR (dB)", "psnr_b": "PSNR-B (dB)", "ssim": "SSIM"}
_METRICS = ("psnr", "psnr_b", "ssim")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(rows: Sequence[dict], path, training_qfs: Sequence[int] = ()) -> Path:
    """Restored vs degraded metric curves over QF, with training QFs marked."""
    qfs = [r["qf"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for ax, key in zip(axes, _METRICS):
        ax.plot(qfs, [r[key] for r in rows], "o-", label="restored")
        ax.plot(qfs, [r[f"degraded_{key}"] for r in rows], "s--", label="degraded")
        for q in training_qfs:
            if qfs and qfs[0] <= q <= qfs[-1]:
                ax.axvline(q, color="0.8", lw=0.8, zorder=0)
        ax.set_xlabel("quality factor")
        ax.set_ylabel(_LABELS[key])
        ax.grid(alpha=0.3)
    axes[0].legend()
    return _save(fig, path)


def plot_bins(table: Sequence[dict], path, title: str) -> Path:
    labels = [r["label"] for r in table]
    x = range(len(table))
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for ax, key in zip(axes, _METRICS):
        ax.bar([i - 0.2 for i in x], [r[f"degraded_{key}"] for r in table], 0.4, label="degraded")
        ax.bar([i + 0.2 for i in x], [r[f"restored_{key}"] for r in table], 0.4, label="restored")
        ax.set_xticks(list(x), labels, rotation=30)
        ax.set_ylabel(_LABELS[key])
    axes[0].legend()
    fig.suptitle(title)
    return _save(fig, path)


def plot_fixed_qf(table: Sequence[dict], path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for ax, key in zip(axes, _METRICS):
        rows = [r for r in table if r["metric"] == key]
        qfs = [r["qf"] for r in rows]
        ax.plot(qfs, [r["degraded"] for r in rows], "s--", label="degraded")
        ax.plot(qfs, [r["restored"] for r in rows], "o-", label="restored")
        ax.set_xlabel("quality factor")
        ax.set_ylabel(_LABELS[key])
        ax.grid(alpha=0.3)
    axes[0].legend()
    return _save(fig, path)
