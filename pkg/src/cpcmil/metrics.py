"""Metrics, fold aggregation, and attention-map export.

All operations are pure. AUC uses the Mann-Whitney rank formulation with
half credit for ties; fold aggregates report population standard deviation
and format as "m +/- s" to match per-fold result tables.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.stats import rankdata

from .data import Bag


def accuracy(labels: list[int], predictions: list[float]) -> float:
    """Fraction of matches after thresholding probabilities at 0.5."""
    if len(labels) != len(predictions) or not labels:
        raise ValueError(f"got {len(labels)} labels and {len(predictions)} predictions")
    hits = sum(1 for y, p in zip(labels, predictions) if int(p > 0.5) == int(y))
    return hits / len(labels)


def roc_auc(labels: list[int], scores: list[float]) -> float:
    """P(score_pos > score_neg) + 0.5 P(equal), via rank statistics.

    Equivalent to the brute-force mean over all (positive, negative) pairs;
    ties get half credit. Raises on single-class input (undefined value).
    """
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.size == 0:
        raise ValueError(f"got {y.shape} labels and {s.shape} scores")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: both classes must be present")
    ranks = rankdata(s, method="average")
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class FoldAggregate:
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))  # population (n divisor)

    def formatted(self, digits: int = 3) -> str:
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"


def aggregate_folds(values: list[float]) -> FoldAggregate:
    if not values:
        raise ValueError("need at least one fold value")
    return FoldAggregate(values=list(values))


# ---------------------------------------------------------------------------
# Attention maps
# ---------------------------------------------------------------------------

def export_attention_map(
    bag: Bag,
    attention: np.ndarray,
    path_base: str | Path,
    image_shape: tuple[int, int] | None = None,
) -> tuple[Path, Path]:
    """Write <base>.png (heatmap) and <base>.csv (raw per-patch weights).

    Each patch cell is filled with its weight normalized by the maximum
    weight, so the strongest instance renders at full intensity. Raw weights
    go to the records file at full precision.
    """
    attention = np.asarray(attention, dtype=np.float64)
    if attention.shape[0] != bag.n_instances:
        raise ValueError(f"{attention.shape[0]} weights for {bag.n_instances} instances")
    size = bag.instances.shape[1]
    if image_shape is None:
        image_shape = (
            int(bag.coords[:, 0].max()) + size,
            int(bag.coords[:, 1].max()) + size,
        )
    h, w = image_shape
    if (bag.coords < 0).any() or (bag.coords[:, 0] + size > h).any() or (
        bag.coords[:, 1] + size > w
    ).any():
        raise ValueError("patch coordinate outside the heatmap layout")
    canvas = np.zeros((h, w), dtype=np.float64)
    peak = attention.max()
    for (r, c), weight in zip(bag.coords, attention):
        canvas[r : r + size, c : c + size] = weight / peak if peak > 0 else 0.0

    base = Path(path_base)
    png_path = base.with_suffix(".png")
    csv_path = base.with_suffix(".csv")
    Image.fromarray(np.round(canvas * 255.0).astype(np.uint8)).save(png_path, format="PNG")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "weight"])
        for (r, c), weight in zip(bag.coords, attention):
            writer.writerow([int(r), int(c), f"{weight:.17g}"])
    return png_path, csv_path


def read_attention_records(path: str | Path) -> list[tuple[int, int, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(int(r), int(c), float(w)) for r, c, w in reader]


def instance_recovery_score(attention: np.ndarray, instance_truth: np.ndarray) -> float:
    """AUC of attention weights against planted instance labels (synthetic only)."""
    truth = [int(t) for t in instance_truth]
    return roc_auc(truth, [float(a) for a in attention])
