"""Three-panel figures for the ESS-versus-approximation experiments."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_experiment(rows: Sequence[dict], path: str | Path, title: str = "") -> Path:
    """Values, differences and ratios against ``|log10 alpha|``; the format follows the file suffix."""
    x = [r["log10_alpha_abs"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))

    ax = axes[0]
    ax.errorbar(x, [r["ess"] for r in rows], yerr=[2 * r["ess_se"] for r in rows], marker="o", ms=4,
                capsize=2, label="rule ESS")
    ax.plot(x, [r["fo"] for r in rows], "s--", ms=4, label="first order")
    ax.plot(x, [r["so"] for r in rows], "^--", ms=4, label="second order")
    ax.set_ylabel("expected sample size")
    ax.legend(fontsize=8)

    ax = axes[1]
    ax.plot(x, [r["diff_fo"] for r in rows], "s-", ms=4, label="ESS - FO")
    ax.plot(x, [r["diff_so"] for r in rows], "^-", ms=4, label="ESS - SO")
    ax.axhline(0.0, color="0.6", lw=0.8)
    ax.set_ylabel("difference")
    ax.legend(fontsize=8)

    ax = axes[2]
    ax.plot(x, [r["ratio_fo"] for r in rows], "s-", ms=4, label="ESS / FO")
    ax.plot(x, [r["ratio_so"] for r in rows], "^-", ms=4, label="ESS / SO")
    ax.axhline(1.0, color="0.6", lw=0.8)
    ax.set_ylabel("ratio")
    ax.legend(fontsize=8)

    for ax in axes:
        ax.set_xlabel(r"$|\log_{10}\alpha|$")
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path
