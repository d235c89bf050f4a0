"""Report figures: calibration, loss curves, accuracy vs iteration."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_calibration_figure(bins: list, path) -> Path:
    """Reliability diagram: per-bin confidence vs empirical accuracy."""
    conf = [b["confidence"] for b in bins]
    acc = [b["accuracy"] for b in bins]
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.plot([0, 1], [0, 1], "--", color="0.6", lw=1, label="perfect")
    ax.plot(conf, acc, "o-", color="tab:blue", label="classification score")
    ax.set_xlabel("mean confidence")
    ax.set_ylabel("empirical accuracy")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="upper left", fontsize=8)
    ax.set_title("confidence calibration")
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return Path(path)


def save_loss_curves_figure(log_rows: list, path) -> Path:
    """Training curves from log rows (step, l_align, l_cls)."""
    steps = [float(r["step"]) for r in log_rows]
    l_align = [float(r["l_align"]) for r in log_rows]
    l_cls = [float(r["l_cls"]) for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.4))
    ax1.plot(steps, l_align, color="tab:blue", lw=0.8)
    ax1.set_xlabel("optimizer step")
    ax1.set_ylabel("alignment loss / example")
    ax1.set_yscale("log")
    ax2.plot(steps, l_cls, color="tab:orange", lw=0.8)
    ax2.set_xlabel("optimizer step")
    ax2.set_ylabel("classifier loss / example")
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return Path(path)


def save_accuracy_iteration_figure(acc_by_iter: list, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    ax.plot(range(len(acc_by_iter)), [100 * a for a in acc_by_iter], "o-",
            color="tab:green")
    ax.set_xlabel("refinement iteration")
    ax.set_ylabel("instance accuracy [%]")
    ax.set_xticks(range(len(acc_by_iter)))
    ax.set_ylim(bottom=0)
    ax.set_title("accuracy vs refinement iterations")
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return Path(path)


def save_category_table_figure(per_category: dict, instance_accuracy: float,
                               path, title: str) -> Path:
    cats = list(per_category)
    accs = [100 * per_category[c]["accuracy"] for c in cats]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(cats) + 1.5), 3.4))
    ax.bar(range(len(cats)), accs, color="tab:blue")
    ax.axhline(100 * instance_accuracy, color="tab:red", ls="--", lw=1,
               label=f"instance {100 * instance_accuracy:.1f}%")
    ax.set_xticks(range(len(cats)))
    ax.set_xticklabels(cats, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("accuracy [%]")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return Path(path)


def read_log_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
