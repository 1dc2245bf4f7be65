"""Report figures written next to the CSV/JSON outputs (file-only, Agg backend)."""
from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .retrieval import MetricsReport  # noqa: E402


def _save(fig, path: Path) -> Path:
    # render to a sibling temp file first so a crash never leaves half a PNG
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, dpi=120, format="png")
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_loss_curve(rows, path) -> Path:
    """``rows`` are (step, total, infonce, ce) tuples as written to loss.log."""
    steps = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for col, label in ((1, "total"), (2, "InfoNCE"), (3, "CE")):
        ax.plot(steps, [r[col] for r in rows], label=label, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_recall_curve(report: MetricsReport, path, max_k: int = 20) -> Path:
    ks, recall = report.recall_curve(min(max_k, report.gallery_size))
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.plot(ks, recall, marker="o", ms=3, lw=1.2)
    ax.axvline(report.percent_cutoff, color="0.6", ls="--", lw=0.8, label=f"1% cutoff (K={report.percent_cutoff})")
    ax.set_xlabel("K")
    ax.set_ylabel("Recall@K")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"{report.direction}, AP = {report.means['AP']:.3f}", fontsize=10)
    ax.legend(frameon=False, loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def read_loss_log(path) -> list[tuple[int, float, float, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        if line:
            step, *vals = line.split(",")
            rows.append((int(step), *map(float, vals)))
    return rows
