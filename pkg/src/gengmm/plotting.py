"""Figures written next to the CSV/JSON outputs. Uses the non-interactive Agg backend."""
from __future__ import annotations

from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_trace(trace: Sequence[dict], path) -> None:
    """Loss terms and held-out target mIoU against iteration."""
    if not trace:
        return
    it = [r["iter"] for r in trace]
    fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(9, 3.4))
    for key, label in (("l_ce_l", "CE labeled"), ("l_ce_u", "CE self-train"), ("l_cl", "contrastive")):
        ax_l.plot(it, [r[key] for r in trace], marker=".", label=label)
    ax_l.set_xlabel("iteration")
    ax_l.set_ylabel("loss")
    ax_l.legend(fontsize=8)
    ax_m.plot(it, [100 * r["target_miou"] for r in trace], marker=".", color="k")
    ax_m.set_xlabel("iteration")
    ax_m.set_ylabel("held-out target mIoU (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(results: Dict[str, Sequence[float]], path, title: str = "") -> None:
    """Median bar per variant with the individual seeds overlaid."""
    names = list(results)
    med = [100 * np.median(results[n]) for n in names]
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 2, 3.4))
    x = np.arange(len(names))
    ax.bar(x, med, color="0.75", edgecolor="k")
    for i, n in enumerate(names):
        vals = 100 * np.asarray(results[n], dtype=float)
        ax.scatter(np.full(len(vals), i), vals, color="k", s=12, zorder=3)
        ax.annotate(f"{med[i]:.1f}", (i, med[i]), ha="center", va="bottom", fontsize=8,
                    xytext=(0, 3), textcoords="offset points")
    ax.set_xticks(x)
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel("held-out target mIoU (%)")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
