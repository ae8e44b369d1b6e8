"""Batch figure rendering for run directories (matplotlib, Agg backend)."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import MissingArtifact  # noqa: E402
from .metrics import MASK_TYPES  # noqa: E402

LOSS_KEYS = ("total", "L_cls", "L_v", "L_o", "L_a", "L_p")
PANEL_COLUMNS = ("input RoI", "visible", "occluding", "prior", "attention", "amodal", "occluded")
DPI = 100


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def loss_curve(history: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [h.get("epoch", i) for i, h in enumerate(history)]
    for key in LOSS_KEYS:
        if history and key in history[0]:
            ax.plot(epochs, [h[key] for h in history], label=key, lw=2 if key == "total" else 1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, Path(path))


def iou_bars(report: dict, path, title: str = "") -> Path:
    types = [t for t in MASK_TYPES if t in report]
    x = np.arange(len(types))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.2, [report[t]["mean_iou"] for t in types], 0.4, label="mean IoU")
    ax.bar(x + 0.2, [report[t]["AP"] for t in types], 0.4, label="AP")
    ax.set_xticks(x, types)
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, Path(path))


def ablation_bars(ablation: dict, path, metric: str = "mean_iou") -> Path:
    """Grouped bars: one group per mask type, one bar per variant, seed spread as error bars."""
    variants = ablation["variants"]
    seeds = [str(s) for s in ablation["seeds"]]
    types = [t for t in MASK_TYPES if any(t in ablation["reports"][v][seeds[0]] for v in variants)]
    x = np.arange(len(types))
    width = 0.8 / max(1, len(variants))
    fig, ax = plt.subplots(figsize=(1.8 * len(types) + 3, 4))
    for i, v in enumerate(variants):
        means, spread = [], []
        for t in types:
            vals = [ablation["reports"][v][s][t][metric] for s in seeds if t in ablation["reports"][v][s]]
            means.append(np.mean(vals) if vals else 0.0)
            spread.append(np.std(vals) if vals else 0.0)
        ax.bar(x + (i - (len(variants) - 1) / 2) * width, means, width, yerr=spread, capsize=2, label=v)
    ax.set_xticks(x, types)
    ax.set_ylim(0, 1)
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(path))


def attention_heatmaps(attention: dict[str, np.ndarray], path, query: int = 0) -> Path:
    """One row per RoI, one column per attention variant (e.g. masked vs unmasked).

    Each array is ``[N, Q, H_r, W_r]``; ``query`` picks the amodal (0) or
    occluded (1) query.
    """
    names = list(attention)
    n = attention[names[0]].shape[0]
    fig, axes = plt.subplots(n, len(names), figsize=(2.2 * len(names), 2.2 * n), squeeze=False)
    for r in range(n):
        for c, name in enumerate(names):
            ax = axes[r, c]
            ax.imshow(attention[name][r, query], cmap="magma")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(name, fontsize=9)
    fig.tight_layout()
    return _save(fig, Path(path))


def roi_panel(columns: dict[str, Optional[np.ndarray]], path) -> Path:
    """A single row of images in the fixed panel order; missing entries stay blank."""
    fig, axes = plt.subplots(1, len(PANEL_COLUMNS), figsize=(1.6 * len(PANEL_COLUMNS), 2.0))
    for ax, name in zip(axes, PANEL_COLUMNS):
        img = columns.get(name)
        if img is not None:
            cmap = "magma" if name == "attention" else "gray"
            vmax = None if name == "attention" else 1.0
            ax.imshow(img, cmap=cmap, vmin=0.0, vmax=vmax)
        ax.set_title(name, fontsize=7)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_run(run_dir, out_dir=None) -> list[Path]:
    """Render every figure the artifacts in ``run_dir`` support."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    if not run_dir.is_dir():
        raise MissingArtifact(f"{run_dir} is not a directory")
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []
    if (run_dir / "history.json").exists():
        made.append(loss_curve(json.loads((run_dir / "history.json").read_text()), out_dir / "loss_curve.png"))
    for ev in sorted(run_dir.glob("eval_*.json")):
        split = ev.stem[len("eval_"):]
        made.append(iou_bars(json.loads(ev.read_text()), out_dir / f"iou_bars_{split}.png", split))
    if (run_dir / "ablation.json").exists():
        made.append(ablation_bars(json.loads((run_dir / "ablation.json").read_text()), out_dir / "ablation_bars.png"))
    if (run_dir / "attention.npz").exists():
        with np.load(run_dir / "attention.npz") as data:
            att = {k: data[k] for k in sorted(data.files)}
        made.append(attention_heatmaps(att, out_dir / "attention_heatmaps.png"))
    if not made:
        raise MissingArtifact(f"no plottable artifacts (history, eval, ablation, attention) in {run_dir}")
    return made
