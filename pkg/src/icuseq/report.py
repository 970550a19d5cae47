"""Render figures from run CSVs.

Each ``render_*`` helper reads one delimited artifact and writes a PNG next
to it (same stem). ``render_run_dir`` walks a run directory and renders
every artifact it recognizes.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "read_csv_rows",
    "render_pretrain_history",
    "render_finetune_history",
    "render_metrics",
    "render_masking_sweep",
    "render_ratio_sweep",
    "render_ablation",
    "render_run_dir",
]


def read_csv_rows(path: Path) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _f(row: dict[str, str], key: str) -> float | None:
    v = row.get(key, "")
    return float(v) if v not in ("", None) else None


def _out_path(csv_path: Path, out_dir: Path | None) -> Path:
    target = Path(out_dir) if out_dir is not None else csv_path.parent
    target.mkdir(parents=True, exist_ok=True)
    return target / (csv_path.stem + ".png")


def _series(rows: list[dict], key: str) -> list[float | None]:
    return [_f(r, key) for r in rows]


def _plot_defined(ax, xs, ys, **kw):
    pts = [(x, y) for x, y in zip(xs, ys) if y is not None]
    if pts:
        ax.plot([p[0] for p in pts], [p[1] for p in pts], **kw)


def render_pretrain_history(csv_path: Path, out_dir: Path | None = None) -> Path:
    rows = read_csv_rows(csv_path)
    epochs = [int(r["epoch"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key, label in (("train_loss", "train"), ("val_loss", "val")):
        _plot_defined(ax1, epochs, _series(rows, key), label=label)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_title("pretraining loss")
    ax1.legend()
    for key in ("val_precision_chart", "val_precision_medication",
                "val_precision_procedure", "val_precision_all"):
        _plot_defined(ax2, epochs, _series(rows, key), label=key.replace("val_precision_", ""))
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("masked-event precision")
    ax2.set_ylim(0.0, 1.05)
    ax2.set_title("validation precision by type")
    ax2.legend()
    fig.tight_layout()
    out = _out_path(csv_path, out_dir)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_finetune_history(csv_path: Path, out_dir: Path | None = None) -> Path:
    rows = read_csv_rows(csv_path)
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    _plot_defined(ax1, epochs, _series(rows, "train_loss"), label="train loss")
    _plot_defined(ax1, epochs, _series(rows, "val_loss"), label="val loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax2 = ax1.twinx()
    _plot_defined(ax2, epochs, _series(rows, "val_score"), color="tab:green", label="val AUROC")
    ax2.set_ylabel("mean binary val AUROC")
    lines1, labels1 = ax1.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax1.legend(lines1 + lines2, labels1 + labels2, loc="best")
    ax1.set_title("finetuning")
    fig.tight_layout()
    out = _out_path(csv_path, out_dir)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_metrics(csv_path: Path, out_dir: Path | None = None) -> Path:
    """Per-task bar chart (AUROC for binary, macro AUROC otherwise)."""
    rows = read_csv_rows(csv_path)
    tasks, values = [], []
    for r in rows:
        v = _f(r, "auroc") if r.get("kind") == "binary" else _f(r, "auroc_macro")
        if v is None:
            continue
        tasks.append(r["task"])
        values.append(v)
    fig, ax = plt.subplots(figsize=(max(6, 0.45 * len(tasks)), 4))
    ax.bar(np.arange(len(tasks)), values)
    ax.set_xticks(np.arange(len(tasks)))
    ax.set_xticklabels(tasks, rotation=60, ha="right", fontsize=8)
    ax.axhline(0.5, color="gray", lw=0.8, ls="--")
    ax.set_ylabel("AUROC (macro for multi-output)")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(csv_path.stem)
    fig.tight_layout()
    out = _out_path(csv_path, out_dir)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_masking_sweep(csv_path: Path, out_dir: Path | None = None) -> Path:
    rows = read_csv_rows(csv_path)
    idents = [r["masking"] for r in rows]
    keys = ("precision_chart", "precision_medication", "precision_procedure", "precision_all")
    x = np.arange(len(idents))
    width = 0.8 / len(keys)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(idents)), 4))
    for i, key in enumerate(keys):
        vals = [(_f(r, key) or 0.0) for r in rows]
        ax.bar(x + (i - (len(keys) - 1) / 2) * width, vals, width, label=key.replace("precision_", ""))
    ax.set_xticks(x)
    ax.set_xticklabels(idents, rotation=30, ha="right")
    ax.set_ylabel("masked-event precision")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("masking-ratio sweep")
    ax.legend()
    fig.tight_layout()
    out = _out_path(csv_path, out_dir)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_ratio_sweep(csv_path: Path, out_dir: Path | None = None) -> Path:
    """Mean binary AUROC vs label fraction, one line per init."""
    rows = read_csv_rows(csv_path)
    # (init, fraction) -> list of per-(seed, task) binary AUROCs
    groups: dict[tuple[str, float], list[float]] = defaultdict(list)
    for r in rows:
        if r.get("kind") != "binary":
            continue
        v = _f(r, "auroc")
        if v is None:
            continue
        groups[(r["init"], float(r["label_fraction"]))].append(v)
    inits = sorted({k[0] for k in groups})
    fig, ax = plt.subplots(figsize=(6, 4))
    for init in inits:
        fracs = sorted({k[1] for k in groups if k[0] == init})
        means = [float(np.mean(groups[(init, f)])) for f in fracs]
        ax.plot(fracs, means, marker="o", label=init)
    ax.set_xlabel("label fraction")
    ax.set_ylabel("mean binary AUROC")
    ax.set_title("label-efficiency sweep")
    ax.legend()
    fig.tight_layout()
    out = _out_path(csv_path, out_dir)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_ablation(csv_path: Path, out_dir: Path | None = None) -> Path:
    """Mean AUROC delta per ablated embedding component."""
    rows = read_csv_rows(csv_path)
    deltas: dict[str, list[float]] = defaultdict(list)
    for r in rows:
        if r["ablated"] == "none":
            continue
        d = _f(r, "delta_auroc")
        if d is not None:
            deltas[r["ablated"]].append(d)
    comps = sorted(deltas)
    means = [float(np.mean(deltas[c])) for c in comps]
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(comps)), 4))
    colors = ["tab:red" if m < 0 else "tab:blue" for m in means]
    ax.bar(np.arange(len(comps)), means, color=colors)
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xticks(np.arange(len(comps)))
    ax.set_xticklabels(comps, rotation=30, ha="right")
    ax.set_ylabel("mean AUROC delta vs base")
    ax.set_title("embedding-component ablation")
    fig.tight_layout()
    out = _out_path(csv_path, out_dir)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


_RENDERERS = (
    ("pretrain_history", render_pretrain_history),
    ("finetune_history", render_finetune_history),
    ("metrics_", render_metrics),
    ("masking_sweep", render_masking_sweep),
    ("ratio_sweep", render_ratio_sweep),
    ("ablation", render_ablation),
)


def render_run_dir(run_dir: Path, out_dir: Path | None = None) -> list[Path]:
    """Render every recognized CSV under ``run_dir`` (recursive)."""
    run_dir = Path(run_dir)
    written = []
    for csv_path in sorted(run_dir.rglob("*.csv")):
        for prefix, fn in _RENDERERS:
            if csv_path.name.startswith(prefix):
                written.append(fn(csv_path, out_dir))
                break
    return written
