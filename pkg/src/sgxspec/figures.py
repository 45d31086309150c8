"""Matplotlib figure rendering for report outputs.

Figures are rendered to files next to the delimited text output; no
interactive backend is ever used.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_attack_figure(result, path):
    """Recovered bytes and attempt counts for one attack run."""
    n = len(result.recovered)
    xs = list(range(n))
    recovered = [b if b is not None else -1 for b in result.recovered]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(max(6, n / 8), 5),
                                   sharex=True)
    ax1.step(xs, recovered, where="mid", label="recovered")
    if result.expected:
        ax1.step(xs, result.expected, where="mid", linestyle="--",
                 label="ground truth")
    ax1.set_ylabel("byte value")
    ax1.set_ylim(-8, 263)
    ax1.legend(loc="upper right", fontsize="small")
    ax2.bar(xs, result.attempts or [0] * n)
    ax2.set_ylabel("attempts")
    ax2.set_xlabel("byte index")
    fig.suptitle(f"recovered {sum(b is not None for b in result.recovered)}"
                 f"/{n} bytes, success rate {result.success_rate:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_matrix_figure(rows, path):
    """Success rate per countermeasure configuration."""
    labels = [r[0] for r in rows]
    rates = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, len(rows) * 1.2), 4))
    ax.bar(range(len(rows)), rates)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize="small")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_scan_figure(type1, type2, path):
    """Gadget exploitability overview: controlled-register counts and
    Type-II lengths."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    if type1:
        labels = [g.location for g in type1]
        ax1.barh(range(len(type1)), [len(g.controlled) for g in type1])
        ax1.set_yticks(range(len(type1)))
        ax1.set_yticklabels(labels, fontsize="small")
    ax1.set_xlabel("controlled registers")
    ax1.set_title("indirect-branch gadgets")
    if type2:
        labels = [g.location for g in type2]
        ax2.barh(range(len(type2)), [g.length for g in type2])
        ax2.set_yticks(range(len(type2)))
        ax2.set_yticklabels(labels, fontsize="small")
    ax2.set_xlabel("gadget length (instructions)")
    ax2.set_title("dependent-load gadgets")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
