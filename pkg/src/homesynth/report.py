"""Figure and table rendering for run reports.

Every report lands as a PNG next to a CSV with the same stem, so runs
can be inspected visually or re-plotted elsewhere.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .core import Dataset
from .evaluate import ComparisonReport


def action_counts(ds: Dataset) -> Counter:
    counts: Counter = Counter()
    for seq in ds.sequences:
        counts.update(seq.tokens())
    return counts


def hour_counts(ds: Dataset) -> Counter:
    counts: Counter = Counter()
    for seq in ds.sequences:
        counts.update(b.timestamp.hour for b in seq.behaviors)
    return counts


def _write_csv(path: Path, header: str, rows: list[str]) -> None:
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")


def save_action_distribution(
    original: Dataset, synthetic: Dataset, out_dir: str | Path, stem: str = "action_distribution"
) -> list[Path]:
    """Side-by-side action frequency bars for original vs synthetic data."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ori = action_counts(original)
    syn = action_counts(synthetic)
    tokens = sorted(set(ori) | set(syn))

    csv_path = out_dir / f"{stem}.csv"
    _write_csv(
        csv_path,
        "action,original_count,synthetic_count",
        [f"{t},{ori.get(t, 0)},{syn.get(t, 0)}" for t in tokens],
    )

    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(tokens)), 4.5))
    xs = range(len(tokens))
    width = 0.4
    ax.bar([x - width / 2 for x in xs], [ori.get(t, 0) for t in tokens], width, label="original")
    ax.bar([x + width / 2 for x in xs], [syn.get(t, 0) for t in tokens], width, label="synthetic")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(tokens, rotation=90, fontsize=7)
    ax.set_ylabel("behavior count")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [png_path, csv_path]


def save_hour_distribution(
    original: Dataset, synthetic: Dataset, out_dir: str | Path, stem: str = "hour_distribution"
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ori = hour_counts(original)
    syn = hour_counts(synthetic)

    csv_path = out_dir / f"{stem}.csv"
    _write_csv(
        csv_path,
        "hour,original_count,synthetic_count",
        [f"{h},{ori.get(h, 0)},{syn.get(h, 0)}" for h in range(24)],
    )

    fig, ax = plt.subplots(figsize=(8, 4))
    hours = list(range(24))
    ax.plot(hours, [ori.get(h, 0) for h in hours], marker="o", label="original")
    ax.plot(hours, [syn.get(h, 0) for h in hours], marker="s", label="synthetic")
    ax.set_xlabel("hour of day")
    ax.set_ylabel("behavior count")
    ax.set_xticks(hours)
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [png_path, csv_path]


def save_loss_histogram(
    losses: Mapping[str, float],
    threshold: float,
    out_dir: str | Path,
    stem: str = "reconstruction_losses",
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    csv_path = out_dir / f"{stem}.csv"
    _write_csv(
        csv_path,
        "sequence_id,loss",
        [f"{sid},{losses[sid]}" for sid in sorted(losses)],
    )

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(list(losses.values()), bins=30)
    ax.axvline(threshold, linestyle="--", color="crimson", label=f"outlier bound {threshold:.3f}")
    ax.set_xlabel("reconstruction loss")
    ax.set_ylabel("sequences")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [png_path, csv_path]


def save_compression_comparison(
    report: ComparisonReport, out_dir: str | Path, stem: str = "compression_comparison"
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    csv_path.write_text(report.to_csv(), encoding="utf-8")

    by_method: dict[str, list[tuple[float, float]]] = {}
    for row in report.rows:
        by_method.setdefault(row.method, []).append((row.rate, row.mean_loss))

    fig, ax = plt.subplots(figsize=(7, 4))
    for method, points in sorted(by_method.items()):
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=method)
    ax.axhline(report.full_mean_loss, linestyle="--", color="gray", label="full data")
    ax.set_xlabel("retention rate")
    ax.set_ylabel("mean test reconstruction loss")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [png_path, csv_path]
