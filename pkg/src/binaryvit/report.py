"""Figure rendering for the analysis and training reports.

Every function writes a PNG next to the caller's delimited output and
returns the path it wrote. The Agg backend keeps this headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import CostReport, RepCapChain


def save_cost_figure(report: CostReport, path: str) -> str:
    """Stacked view of where the compute and the parameters live."""
    kinds = []
    ops_by_kind = {}
    params_by_kind = {}
    for layer in report.per_layer:
        if layer.kind not in ops_by_kind:
            kinds.append(layer.kind)
            ops_by_kind[layer.kind] = 0.0
            params_by_kind[layer.kind] = 0
        ops_by_kind[layer.kind] += layer.bops / 64 + layer.flops
        params_by_kind[layer.kind] += layer.params

    fig, (ax_ops, ax_par) = plt.subplots(1, 2, figsize=(10, 4))
    y = np.arange(len(kinds))
    ax_ops.barh(y, [ops_by_kind[k] for k in kinds], color="#4878cf")
    ax_ops.set_yticks(y, kinds)
    ax_ops.set_xlabel("equivalent operations")
    ax_ops.set_title(f"{report.model_name}: compute by layer kind")
    ax_par.barh(y, [params_by_kind[k] for k in kinds], color="#6acc65")
    ax_par.set_yticks(y, kinds)
    ax_par.set_xlabel("parameters")
    ax_par.set_title("parameters by layer kind")
    for ax in (ax_ops, ax_par):
        ax.invert_yaxis()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_repcap_figure(chain: RepCapChain, path: str) -> str:
    """Running capacity value over the chain's steps, log scale."""
    running = [step.running for step in chain.steps]
    labels = [step.label for step in chain.steps]
    fig, ax = plt.subplots(figsize=(max(6, len(running) * 0.9), 4))
    x = np.arange(len(running))
    ax.plot(x, running, marker="o", color="#4878cf")
    ax.set_yscale("log")
    ax.set_xticks(x, labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("running capacity")
    ax.set_title(f"{chain.name}: capacity accumulation")
    if chain.published_total is not None:
        color = "#d65f5f" if chain.diverges else "#6acc65"
        ax.axhline(chain.published_total, linestyle="--", color=color)
        ax.annotate(
            f"published {chain.published_total:,}",
            (0, chain.published_total),
            textcoords="offset points",
            xytext=(4, 6),
            color=color,
            fontsize=8,
        )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_training_figure(trace, path: str, smooth_window: int = 25) -> str:
    """Loss (raw and smoothed) and accuracy curves from a metrics trace."""
    steps = np.array([row["step"] for row in trace])
    loss = np.array([row["loss"] for row in trace])
    acc = np.array([row["accuracy"] for row in trace])

    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(steps, loss, color="#c4c4c4", linewidth=0.8, label="loss")
    if len(loss) >= smooth_window:
        kernel = np.ones(smooth_window) / smooth_window
        smoothed = np.convolve(loss, kernel, mode="valid")
        ax_loss.plot(
            steps[smooth_window - 1 :], smoothed, color="#4878cf", label="smoothed"
        )
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(steps, acc, color="#6acc65")
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("batch accuracy")
    ax_acc.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
