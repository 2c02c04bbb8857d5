"""Whole-image segmentation: predict on a stride grid, fill from the nearest grid pixel."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .dataio import save_image, save_mask
from .network import NetworkSpec, Params, forward
from .patches import PatchExtractor
from .training import branch_inputs

OUTSIDE, SAMPLED, FILLED = 0, 1, 2


@dataclass
class Prediction:
    probability: np.ndarray  # float64, 0 outside the ROI
    flags: np.ndarray  # uint8: OUTSIDE / SAMPLED / FILLED
    mask: np.ndarray
    threshold: float

    def rethreshold(self, threshold: float) -> np.ndarray:
        return (self.probability >= threshold) & (self.flags != OUTSIDE)


def grid_pixels(roi: np.ndarray, stride: int, anchor: tuple[int, int] = (0, 0)) -> np.ndarray:
    """ROI pixels whose row and col are congruent to the anchor modulo ``stride``."""
    h, w = roi.shape
    rr, cc = np.indices((h, w))
    on = roi & (rr % stride == anchor[0] % stride) & (cc % stride == anchor[1] % stride)
    return np.argwhere(on)


def predict_centers(params: Params, spec: NetworkSpec, image: np.ndarray, centers: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode foreground probability at each center."""
    ext = PatchExtractor(image, spec.long_side, spec.short_side, params.dtype)
    out = np.empty(len(centers), dtype=np.float64)
    for s in range(0, len(centers), batch_size):
        c = centers[s:s + batch_size]
        n = len(c)
        if n < batch_size:
            # pad to a full batch: BLAS results can depend on the row count
            c = np.concatenate([c, np.repeat(c[-1:], batch_size - n, axis=0)])
        with ad.no_grad():
            out[s:s + n] = forward(params, spec, branch_inputs(spec, ext, c), training=False).probability.data[:n]
    return out


def fill_nearest(shape, roi: np.ndarray, grid: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Copy each grid value to the ROI pixels for which it is the nearest grid pixel.

    Distance is Euclidean; ties go to the grid pixel with the smaller row,
    then the smaller col.
    """
    prob = np.zeros(shape, dtype=np.float64)
    flags = np.zeros(shape, dtype=np.uint8)
    if len(grid) == 0:
        return prob, flags
    prob[grid[:, 0], grid[:, 1]] = values
    flags[grid[:, 0], grid[:, 1]] = SAMPLED
    rest = np.argwhere(roi & (flags == 0))
    if len(rest) == 0:
        return prob, flags
    tree = cKDTree(grid.astype(np.float64))
    dmin, _ = tree.query(rest.astype(np.float64), k=1)
    # gather every grid pixel at the minimal distance, then pick by exact
    # integer (d^2, row, col)
    cands = tree.query_ball_point(rest.astype(np.float64), dmin + 1e-6)
    best = np.empty(len(rest), dtype=np.int64)
    for i, cs in enumerate(cands):
        if len(cs) == 1:
            best[i] = cs[0]
            continue
        cs = np.asarray(cs)
        g = grid[cs]
        d2 = (g[:, 0] - rest[i, 0]) ** 2 + (g[:, 1] - rest[i, 1]) ** 2
        best[i] = cs[np.lexsort((g[:, 1], g[:, 0], d2))[0]]
    prob[rest[:, 0], rest[:, 1]] = values[best]
    flags[rest[:, 0], rest[:, 1]] = FILLED
    return prob, flags


def predict_image(params: Params, spec: NetworkSpec, image: np.ndarray, roi: np.ndarray | None = None, stride: int = 3,
                  threshold: float = 0.5, anchor: tuple[int, int] = (0, 0), batch_size: int = 256) -> Prediction:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D grayscale image, got shape {image.shape}")
    roi = np.ones(image.shape, dtype=bool) if roi is None else np.asarray(roi, dtype=bool)
    if roi.shape != image.shape:
        raise ValueError(f"ROI extent {roi.shape} != image extent {image.shape}")
    grid = grid_pixels(roi, stride, anchor)
    values = predict_centers(params, spec, image, grid, batch_size) if len(grid) else np.zeros(0)
    prob, flags = fill_nearest(image.shape, roi, grid, values)
    mask = (prob >= threshold) & (flags != OUTSIDE)
    return Prediction(prob, flags, mask, threshold)


def write_prediction(pred: Prediction, stem: str | Path, raw: bool = True) -> list[Path]:
    """``<stem>_prob.pgm`` (round(255 p)), ``<stem>_mask.pgm`` and optionally ``<stem>_prob.f8``."""
    stem = Path(stem)
    paths = [stem.with_name(stem.name + "_prob.pgm"), stem.with_name(stem.name + "_mask.pgm")]
    save_image(pred.probability, paths[0])
    save_mask(pred.mask, paths[1])
    if raw:
        p = stem.with_name(stem.name + "_prob.f8")
        p.write_bytes(pred.probability.astype("<f8").tobytes())
        paths.append(p)
    return paths
