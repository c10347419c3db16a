"""Figures written next to the JSON/CSV outputs (Agg backend, no display needed)."""
from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "udcface",
}
# no timestamp or version string in the PNG, so re-runs are byte-identical
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_report(rows, path) -> Path:
    """Per-image PSNR / SSIM / LMD bars with the mean drawn as a dashed line."""
    ids = [r["id"] for r in rows]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 3, figsize=(9, 2.6), constrained_layout=True)
        for ax, key, label in zip(axes, ("psnr", "ssim", "lmd"), ("PSNR (dB)", "SSIM", "LMD (px)")):
            vals = [r[key] for r in rows]
            finite = [v for v in vals if v is not None and not math.isnan(v)]
            ax.bar(range(len(vals)), [0 if (v is None or math.isnan(v)) else v for v in vals], color="0.55")
            if finite:
                ax.axhline(sum(finite) / len(finite), color="k", lw=0.8, ls="--")
            ax.set_title(label)
            ax.set_xticks(range(len(ids)))
            ax.set_xticklabels(ids if len(ids) <= 12 else [""] * len(ids), rotation=90)
        return _save(fig, path)


def plot_training_log(log_path, path) -> Path:
    """Loss terms and learning rate against iteration from a JSON-lines log."""
    records = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line.strip()]
    its = [r["iter"] for r in records]
    keys = [k for k in (records[0] if records else {}) if k not in ("iter", "lr")]
    with plt.rc_context(_RC):
        fig, (ax, ax_lr) = plt.subplots(1, 2, figsize=(8, 2.6), constrained_layout=True)
        for k in keys:
            ax.plot(its, [r[k] for r in records], lw=0.8, label=k)
        ax.set_xlabel("iteration")
        ax.set_title("losses")
        if keys:
            ax.legend(frameon=False)
        ax_lr.plot(its, [r["lr"] for r in records], color="k", lw=0.8)
        ax_lr.set_yscale("log")
        ax_lr.set_xlabel("iteration")
        ax_lr.set_title("learning rate")
        return _save(fig, path)
