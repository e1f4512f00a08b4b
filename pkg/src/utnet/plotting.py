"""Figures written next to the CSV reports (SVG by default, PNG by suffix)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import FOREGROUND, CLASS_LABELS  # noqa: E402

# fixed ids and no timestamp, so the same data gives the same SVG bytes
plt.rcParams["svg.hashsalt"] = "utnet"
_META = {"svg": {"Date": None}, "png": {}}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower() or "svg"
    fig.savefig(path, format=fmt, metadata=_META.get(fmt, {}))
    plt.close(fig)
    return path


def plot_training(history: list[dict], path: str | Path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].plot(epochs, [h["train_loss"] for h in history], marker=".")
    ax[0].set(xlabel="epoch", ylabel="train loss (dice + CE)")
    if history and history[0].get("val_dice_mean", "") != "":
        for c in FOREGROUND:
            key = f"val_dice_{CLASS_LABELS[c]}"
            ax[1].plot(epochs, [h[key] for h in history], label=CLASS_LABELS[c])
        ax[1].plot(epochs, [h["val_dice_mean"] for h in history], "k--", label="mean")
        ax[1].set(xlabel="epoch", ylabel="validation dice", ylim=(0, 1))
        ax[1].legend(loc="lower right")
    else:
        ax[1].axis("off")
    fig.tight_layout()
    return _save(fig, path)


def plot_bench(records, path: str | Path) -> Path:
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    for variant in sorted({r.variant for r in records}):
        rs = [r for r in records if r.variant == variant]
        ax[0].loglog([r.n for r in rs], [r.seconds for r in rs], marker="o", label=variant)
        ax[1].loglog([r.n for r in rs], [r.buffer_bytes for r in rs], marker="o", label=variant)
    ax[0].set(xlabel="sequence length n = H*W", ylabel="median seconds per call")
    ax[1].set(xlabel="sequence length n = H*W", ylabel="attention buffer bytes")
    for a in ax:
        a.legend()
        a.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_eval(report, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / (len(FOREGROUND) + 1)
    for i, c in enumerate((*FOREGROUND, None)):
        xs = [j + (i - len(FOREGROUND) / 2) * width for j in range(len(report.vendors))]
        ys = [report.dice_mean(v, c) for v in report.vendors]
        ax.bar(xs, ys, width, label=CLASS_LABELS.get(c, "mean"))
    ax.set_xticks(range(len(report.vendors)), report.vendors)
    ax.set(xlabel="vendor", ylabel="test dice", ylim=(0, 1))
    ax.legend(ncol=4, fontsize="small", loc="lower center")
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows: list[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = [str(r["value"]) for r in rows]
    vals = [r["best_val_dice_mean"] if r["best_val_dice_mean"] != "" else 0.0 for r in rows]
    ax.bar(labels, vals)
    ax.set(xlabel=rows[0]["axis"] if rows else "", ylabel="best validation dice", ylim=(0, 1))
    fig.tight_layout()
    return _save(fig, path)


def plot_compare(rows: list[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    models = sorted({r["model"] for r in rows})
    for i, m in enumerate(models):
        rs = [r for r in rows if r["model"] == m]
        ys = [sum(r[f"dice_{v}"] for r in rs) / len(rs) for v in "ABCD"]
        ax.bar([j + (i - 0.5) * 0.4 for j in range(4)], ys, 0.4, label=m)
    ax.set_xticks(range(4), list("ABCD"))
    ax.set(xlabel="vendor", ylabel="test dice (mean over seeds)", ylim=(0, 1))
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
