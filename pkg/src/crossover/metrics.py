"""Segmentation metrics: Dice, Hausdorff distance, over/under-segmentation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


class UndefinedMetric(ValueError):
    """The metric has no value for these masks (e.g. an empty mask)."""


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask extents differ: {p.shape} vs {g.shape}")
    return p, g


def dsc(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); 1 when both masks are empty."""
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def mask_boundary(mask) -> np.ndarray:
    """Mask pixels 4-adjacent to the complement; outside the image counts as complement."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    return m & ~inner


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance between the boundary pixel sets (Euclidean)."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        raise UndefinedMetric("Hausdorff distance is undefined for an empty mask")
    bp = np.argwhere(mask_boundary(p)).astype(np.float64)
    bg = np.argwhere(mask_boundary(g)).astype(np.float64)
    d_pg = cKDTree(bg).query(bp, k=1)[0].max()
    d_gp = cKDTree(bp).query(bg, k=1)[0].max()
    return float(max(d_pg, d_gp))


def over_under(pred, gt) -> tuple[float, float]:
    """(|P \\ G| / |P u G|, |G \\ P| / |P u G|)."""
    p, g = _pair(pred, gt)
    if not g.any():
        raise ValueError("over/under-segmentation ratios need a non-empty ground truth")
    union = int((p | g).sum())
    return int((p & ~g).sum()) / union, int((g & ~p).sum()) / union


@dataclass
class MetricsReport:
    dsc: float
    hd: float | None  # None when undefined
    or_ratio: float
    ur_ratio: float

    def row(self, image_id: str) -> list[str]:
        hd = "undefined" if self.hd is None else _fmt(self.hd)
        return [image_id, _fmt(self.dsc), hd, _fmt(self.or_ratio), _fmt(self.ur_ratio)]


def _fmt(v: float) -> str:
    return f"{v:.6f}" if math.isfinite(v) else str(v)


def evaluate(pred, gt) -> MetricsReport:
    try:
        hd = hausdorff(pred, gt)
    except UndefinedMetric:
        hd = None
    if np.asarray(gt, dtype=bool).any():
        o, u = over_under(pred, gt)
    else:
        o, u = float("nan"), float("nan")
    return MetricsReport(dsc(pred, gt), hd, o, u)


METRICS_HEADER = ["image_id", "dsc", "hd", "or", "ur"]


def write_metrics_csv(rows: Iterable[tuple[str, MetricsReport]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRICS_HEADER)
        for image_id, rep in rows:
            wr.writerow(rep.row(image_id))
