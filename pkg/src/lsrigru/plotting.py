"""Matplotlib rendering for the report path. Headless backend, deterministic output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

FIG_SIZE = (8.0, 5.0)
DPI = 120

# Strip the Software tag so identical runs produce byte-identical PNGs.
_PNG_METADATA = {"Software": None}


def _format_metric(value: float) -> str:
    return "n/a" if value != value else f"{value:.3f}"


def render_equity_figure(curve: pd.DataFrame, metrics, path) -> None:
    """Two stacked panels: cumulative value curves and the excess drawdown."""
    x = np.arange(len(curve))
    fig, (ax_top, ax_bot) = plt.subplots(
        2, 1, figsize=FIG_SIZE, sharex=True,
        gridspec_kw={"height_ratios": [3, 1]})

    ax_top.plot(x, curve["portfolio_value"], label="portfolio", color="tab:red", lw=1.4)
    ax_top.plot(x, curve["benchmark_value"], label="benchmark", color="tab:blue", lw=1.2)
    ax_top.plot(x, curve["excess_value"], label="excess", color="tab:orange", lw=1.2)
    ax_top.axhline(1.0, color="grey", lw=0.6, ls=":")
    ax_top.set_ylabel("cumulative value")
    ax_top.legend(loc="upper left", fontsize=8, frameon=False)
    summary = (f"ARR {_format_metric(metrics.ARR)}   AVoL {_format_metric(metrics.AVoL)}   "
               f"MDD {_format_metric(metrics.MDD)}   ASR {_format_metric(metrics.ASR)}   "
               f"CR {_format_metric(metrics.CR)}   IR {_format_metric(metrics.IR)}")
    ax_top.set_title(summary, fontsize=9)

    ax_bot.fill_between(x, curve["excess_drawdown"], 0.0, color="tab:orange", alpha=0.5)
    ax_bot.set_ylabel("excess dd")
    ax_bot.set_xlabel("trading day")

    tick_idx = np.linspace(0, len(curve) - 1, num=min(6, len(curve)), dtype=int)
    ax_bot.set_xticks(tick_idx)
    ax_bot.set_xticklabels([curve["date"].iloc[i] for i in tick_idx],
                           rotation=30, ha="right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata=_PNG_METADATA)
    plt.close(fig)


def render_loss_figure(loss_log: list[dict], path) -> None:
    """Per-epoch training (and validation, when present) loss curves."""
    epochs = [entry["epoch"] for entry in loss_log]
    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    ax.plot(epochs, [entry["train_loss"] for entry in loss_log],
            marker="o", ms=3, label="train", color="tab:red")
    if loss_log and "valid_loss" in loss_log[0]:
        ax.plot(epochs, [entry["valid_loss"] for entry in loss_log],
                marker="s", ms=3, label="valid", color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean squared error")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata=_PNG_METADATA)
    plt.close(fig)
