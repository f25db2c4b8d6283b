"""Figures written next to the JSON reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TOOL_ORDER = ("crop", "text_search", "image_search")
TOOL_COLORS = {"crop": "#4C72B0", "text_search": "#DD8452", "image_search": "#55A868"}


def style_ax(ax):
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    ax.tick_params(labelsize=9)


def plot_tool_usage(histogram: dict, path: str | Path) -> Path:
    """Grouped bars of tool-call share per benchmark, plus mean calls per trajectory."""
    benches = list(histogram["benchmarks"])
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.5), gridspec_kw={"width_ratios": [3, 1]})
    x = np.arange(len(benches))
    width = 0.8 / len(TOOL_ORDER)
    for i, tool in enumerate(TOOL_ORDER):
        shares = []
        for b in benches:
            counts = histogram["benchmarks"][b]["counts"]
            total = sum(counts.get(t, 0) for t in TOOL_ORDER)
            shares.append(counts.get(tool, 0) / total if total else 0.0)
        ax.bar(x + (i - 1) * width, shares, width, label=tool, color=TOOL_COLORS[tool])
    ax.set_xticks(x, benches)
    ax.set_ylabel("share of tool calls")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=8)
    style_ax(ax)

    means = [np.mean(histogram["benchmarks"][b]["calls_per_trajectory"] or [0]) for b in benches]
    ax2.bar(x, means, 0.6, color="0.5")
    ax2.set_xticks(x, benches)
    ax2.set_ylabel("calls / trajectory")
    style_ax(ax2)
    fig.tight_layout()
    return _save(fig, path)


def plot_metric_report(report: dict, path: str | Path) -> Path:
    """Per-item score bars with the aggregate as a horizontal line."""
    records = report["records"]
    ids = [r["item_id"] for r in records]
    scores = [r["score"] if r["score"] is not None else np.nan for r in records]
    fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(ids) + 2), 3))
    ax.bar(np.arange(len(ids)), scores, 0.7, color="#4C72B0")
    ax.axhline(report["value"], color="k", lw=1, ls="--", label=f"{report['metric']} = {report['value']:.3f}")
    ax.set_xticks(np.arange(len(ids)), ids, rotation=60, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend(frameon=False, fontsize=8)
    style_ax(ax)
    fig.tight_layout()
    return _save(fig, path)


def plot_advantages(reports: list[dict], path: str | Path) -> Path:
    """Advantages of every group, one colour per minibatch."""
    fig, ax = plt.subplots(figsize=(5, 3))
    x = 0
    for m, report in enumerate(reports):
        for values in report["per_group_advantages"]:
            ax.scatter(np.full(len(values), x), values, s=14, color=f"C{m % 10}")
            x += 1
    ax.axhline(0, color="0.6", lw=0.8)
    ax.set_xlabel("group")
    ax.set_ylabel("advantage")
    values = ", ".join(f"{r['value']:.4g}" for r in reports[:4])
    ax.set_title(f"objective: {values}{' ...' if len(reports) > 4 else ''}", fontsize=9)
    style_ax(ax)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
