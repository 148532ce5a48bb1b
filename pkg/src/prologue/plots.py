"""Figure emission from metric CSVs. Figures are produced from the data files
only, and every PNG gets a JSON sidecar with the plotted arrays so it can be
re-rendered without recomputation."""

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _read_csv(path, required):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in required if c not in cols]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        return list(reader)


def _sidecar(out_png, payload):
    side = Path(out_png).with_suffix(".json")
    with open(side, "w") as fh:
        json.dump(payload, fh, indent=2)
    return str(side)


def plot_sweep(csv_path, out_png):
    """Final recon error vs AR weight, one line per arm, log-x."""
    rows = _read_csv(csv_path, ["arm", "ar_weight", "recon_l1", "ce_visual"])
    arms = defaultdict(lambda: ([], [], []))
    for row in rows:
        xs, ys, zs = arms[row["arm"]]
        xs.append(float(row["ar_weight"]))
        ys.append(float(row["recon_l1"]))
        zs.append(float(row["ce_visual"]))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for arm, (xs, ys, zs) in sorted(arms.items()):
        order = sorted(range(len(xs)), key=xs.__getitem__)
        xs, ys, zs = [xs[i] for i in order], [ys[i] for i in order], [zs[i] for i in order]
        axes[0].plot(xs, ys, marker="o", label=arm)
        axes[1].plot(xs, zs, marker="o", label=arm)
    for ax, ylabel in zip(axes, ["held-out recon L1", "held-out visual CE (nats)"]):
        ax.set_xscale("log")
        ax.set_xlabel("AR loss weight")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    _sidecar(out_png, {"kind": "sweep", "rows": rows})


def plot_curves(csv_paths, out_png, metrics=("eval/recon_l1", "eval/ce_total")):
    """Overlay metric histories of several runs; lines labeled by run name."""
    series = {}
    for path in csv_paths:
        rows = _read_csv(path, ["step", "metric", "value"])
        label = Path(path).parent.name or Path(path).stem
        for metric in metrics:
            pts = [(int(r["step"]), float(r["value"])) for r in rows if r["metric"] == metric]
            if pts:
                series[(label, metric)] = pts
    fig, axes = plt.subplots(1, len(metrics), figsize=(4.5 * len(metrics), 3.5), squeeze=False)
    for j, metric in enumerate(metrics):
        ax = axes[0][j]
        drawn = 0
        for (label, m), pts in sorted(series.items()):
            if m == metric:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], label=label)
                drawn += 1
        ax.set_xlabel("step")
        ax.set_ylabel(metric)
        if drawn:
            ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    _sidecar(out_png, {"kind": "curves", "series": {f"{l}|{m}": v for (l, m), v in series.items()}})


def plot_cfg_tradeoff(csv_path, out_png):
    """Two panels over the visual guidance scale: quality proxy left,
    diversity proxy right."""
    rows = _read_csv(csv_path, ["s_vis", "quality", "diversity"])
    rows.sort(key=lambda r: float(r["s_vis"]))
    xs = [float(r["s_vis"]) for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(xs, [float(r["quality"]) for r in rows], marker="o")
    axes[0].set_ylabel("class-consistency proxy")
    axes[1].plot(xs, [float(r["diversity"]) for r in rows], marker="o")
    axes[1].set_ylabel("intra-class diversity proxy")
    for ax in axes:
        ax.set_xlabel("visual guidance scale")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    _sidecar(out_png, {"kind": "cfg-tradeoff", "rows": rows})


def save_heatmap(matrix, out_png, title=None, boundary=None):
    """Render an attention matrix; optional vertical line at the group split."""
    fig, ax = plt.subplots(figsize=(4.2, 4))
    im = ax.imshow(matrix, cmap="viridis", interpolation="nearest")
    if boundary is not None:
        ax.axvline(boundary - 0.5, color="w", linestyle="--", linewidth=0.8)
        ax.axhline(boundary - 0.5, color="w", linestyle="--", linewidth=0.8)
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
