"""Report rendering: per-class summary tables and figures from metric CSVs.

Outputs are static files only: a summary CSV plus PNG figures (per-class
Dice bars by stage, adaptation-loss traces). File names carry a content
hash of the inputs, so identical inputs produce identical names.
"""

from __future__ import annotations

import hashlib
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .labels import CLASS_NAMES
from .metrics import METRIC_COLUMNS

CLASS_ORDER = [CLASS_NAMES[c] for c in sorted(CLASS_NAMES)]


def _metric_files(metrics_dir):
    out = []
    for name in sorted(os.listdir(metrics_dir)):
        if not name.endswith(".csv"):
            continue
        path = os.path.join(metrics_dir, name)
        try:
            head = pd.read_csv(path, nrows=0)
        except Exception:
            continue
        if set(METRIC_COLUMNS) <= set(head.columns):
            out.append(path)
    return out


def _inputs_hash(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(os.path.basename(p).encode())
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()[:8]


def load_metrics(metrics_dir) -> pd.DataFrame:
    frames = [pd.read_csv(p) for p in _metric_files(metrics_dir)]
    if not frames:
        return pd.DataFrame(columns=METRIC_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def summarize(df: pd.DataFrame) -> pd.DataFrame:
    """Per (stage, class) mean and std of Dice and HD95; missing HD95
    values are excluded from the aggregation, never imputed."""
    g = df.groupby(["stage", "class_name"])
    out = g.agg(
        dice_mean=("dice", "mean"),
        dice_std=("dice", "std"),
        hd95_mean=("hd95", "mean"),
        hd95_std=("hd95", "std"),
        n=("dice", "size"),
    ).reset_index()
    return out.fillna({"dice_std": 0.0, "hd95_std": 0.0})


def _dice_figure(summary: pd.DataFrame, path):
    fig, ax = plt.subplots(figsize=(8, 4))
    stages = sorted(summary["stage"].unique())
    classes = [c for c in CLASS_ORDER if c in set(summary["class_name"])]
    width = 0.8 / max(len(stages), 1)
    xs = np.arange(len(classes))
    for i, stage in enumerate(stages):
        sel = summary[summary["stage"] == stage].set_index("class_name")
        means = [sel["dice_mean"].get(c, np.nan) for c in classes]
        stds = [sel["dice_std"].get(c, 0.0) for c in classes]
        ax.bar(xs + i * width, means, width=width, yerr=stds, capsize=2, label=stage)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(classes, rotation=30, ha="right")
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _trace_figure(trace_csv, path):
    df = pd.read_csv(trace_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    for sid, grp in df.groupby("subject_id"):
        ax.plot(grp["step"], grp["inner_loss"], marker="o", ms=2, lw=1, label=str(sid))
    ax.set_xlabel("adaptation step")
    ax.set_ylabel("adaptation loss")
    if df["subject_id"].nunique() <= 12:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(metrics_dir, out_dir) -> list[str]:
    """Render tables and figures; an explicit no-data note when the
    metrics directory holds nothing usable."""
    os.makedirs(out_dir, exist_ok=True)
    files = _metric_files(metrics_dir)
    written = []
    if not files:
        path = os.path.join(out_dir, "report_no_data.txt")
        with open(path, "w") as fh:
            fh.write("no metric files found; nothing to report\n")
        return [path]
    tag = _inputs_hash(files)
    df = load_metrics(metrics_dir)
    summary = summarize(df)
    csv_path = os.path.join(out_dir, f"summary_{tag}.csv")
    summary.to_csv(csv_path, index=False, float_format="%.9f")
    written.append(csv_path)
    fig_path = os.path.join(out_dir, f"dice_by_class_{tag}.png")
    _dice_figure(summary, fig_path)
    written.append(fig_path)
    trace_csv = os.path.join(metrics_dir, "adaptation_trace.csv")
    if os.path.exists(trace_csv):
        trace_path = os.path.join(out_dir, f"adaptation_trace_{tag}.png")
        _trace_figure(trace_csv, trace_path)
        written.append(trace_path)
    return written
