"""Crossover-patch extraction and boundary-dense training-center sampling.

Pixel coordinates are 0-based ``(row, col)``. A block of extent ``n`` along
an axis starts ``n // 2`` pixels before the center, so for even ``n`` the
center is the ``n // 2 + 1``-th pixel of the block.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

FOREGROUND = 1
BACKGROUND = 0


@dataclass
class CrossoverPatch:
    center: tuple[int, int]
    vertical: np.ndarray  # L x S
    horizontal: np.ndarray  # S x L
    label: int | None = None

    @property
    def long_side(self) -> int:
        return self.vertical.shape[0]

    @property
    def short_side(self) -> int:
        return self.vertical.shape[1]

    def overlap(self) -> tuple[np.ndarray, np.ndarray]:
        """The S x S overlap square as seen from each block."""
        L, S = self.vertical.shape
        off = L // 2 - S // 2
        return self.vertical[off:off + S, :], self.horizontal[:, off:off + S]


def _check_geometry(L: int, S: int) -> None:
    if not (L > S >= 1):
        raise ValueError(f"crossover patch needs L > S >= 1, got L={L}, S={S}")


def extract_crossover(image: np.ndarray, center: tuple[int, int], L: int, S: int, label: int | None = None) -> CrossoverPatch:
    """Cut the L x S and S x L blocks around ``center``; outside pixels are 0."""
    _check_geometry(L, S)
    image = np.asarray(image)
    h, w = image.shape
    r, c = center
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"center {center} outside image of shape {image.shape}")
    vert = _window(image, r - L // 2, c - S // 2, L, S)
    horiz = _window(image, r - S // 2, c - L // 2, S, L)
    return CrossoverPatch((int(r), int(c)), vert, horiz, label)


def _window(image: np.ndarray, top: int, left: int, rows: int, cols: int) -> np.ndarray:
    h, w = image.shape
    out = np.zeros((rows, cols), dtype=image.dtype)
    r0, r1 = max(top, 0), min(top + rows, h)
    c0, c1 = max(left, 0), min(left + cols, w)
    if r0 < r1 and c0 < c1:
        out[r0 - top:r1 - top, c0 - left:c1 - left] = image[r0:r1, c0:c1]
    return out


class PatchExtractor:
    """Batched crossover extraction from one image (zero-padded once)."""

    def __init__(self, image: np.ndarray, L: int, S: int, dtype=np.float64):
        _check_geometry(L, S)
        self.L, self.S = L, S
        self.shape = image.shape
        self.pad = L
        padded = np.pad(np.asarray(image, dtype=dtype), L)
        self._padded = padded
        self._vwin = sliding_window_view(padded, (L, S))
        self._hwin = sliding_window_view(padded, (S, L))

    def extract(self, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(N x 1 x L x S, N x 1 x S x L)`` arrays for ``N`` centers."""
        centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
        h, w = self.shape
        if len(centers) and (centers.min() < 0 or (centers[:, 0] >= h).any() or (centers[:, 1] >= w).any()):
            raise ValueError("center outside image")
        r = centers[:, 0] + self.pad
        c = centers[:, 1] + self.pad
        L, S = self.L, self.S
        vert = self._vwin[r - L // 2, c - S // 2][:, None]
        horiz = self._hwin[r - S // 2, c - L // 2][:, None]
        return np.ascontiguousarray(vert), np.ascontiguousarray(horiz)

    def extract_square(self, centers: np.ndarray, size: int) -> np.ndarray:
        """Square ``size x size`` blocks around each center (zero-filled)."""
        if size > 2 * self.pad:
            raise ValueError("square block larger than the padding")
        centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
        win = sliding_window_view(self._padded, (size, size))
        r = centers[:, 0] + self.pad - size // 2
        c = centers[:, 1] + self.pad - size // 2
        return np.ascontiguousarray(win[r, c][:, None])


# -- sampling --------------------------------------------------------------

@dataclass
class SamplerConfig:
    boundary_band: int = 3
    interior_stride: int = 2
    max_stride: int = 8

    def __post_init__(self):
        if self.boundary_band < 1 or self.interior_stride < 1 or self.max_stride < 1:
            raise ValueError("sampler band and strides must be >= 1")

    def exterior_stride(self, d: int) -> int:
        return min(self.max_stride, 2 * math.ceil(d / self.boundary_band))


@dataclass
class SampleSet:
    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray
    provenance: list[str]
    warning: str | None = None

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def centers(self) -> np.ndarray:
        return np.stack([self.rows, self.cols], axis=1)

    def by_label(self, label: int) -> np.ndarray:
        return self.centers[self.labels == label]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["row", "col", "label", "provenance"])
            for r, c, y, p in zip(self.rows, self.cols, self.labels, self.provenance):
                wr.writerow([int(r), int(c), int(y), p])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SampleSet":
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            if rd.fieldnames != ["row", "col", "label", "provenance"]:
                raise ValueError(f"{path}: expected header row,col,label,provenance, got {rd.fieldnames}")
            recs = list(rd)
        return cls(
            np.array([int(r["row"]) for r in recs], dtype=np.int64),
            np.array([int(r["col"]) for r in recs], dtype=np.int64),
            np.array([int(r["label"]) for r in recs], dtype=np.int64),
            [r["provenance"] for r in recs],
        )


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (image edge is not background)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1), border_value=1)
    return mask & ~eroded


def boundary_distance(mask: np.ndarray) -> np.ndarray:
    """Chebyshev distance of every pixel to the nearest boundary pixel."""
    b = boundary_pixels(mask)
    return ndimage.distance_transform_cdt(~b, metric="chessboard").astype(np.int64)


def _spread(members: np.ndarray, grid: np.ndarray, count: int) -> np.ndarray:
    """``count`` members, evenly spaced in raster order, grid pixels first."""
    on = np.flatnonzero((members & grid).reshape(-1))
    off = np.flatnonzero((members & ~grid).reshape(-1))
    if count <= len(on):
        pick = on[np.linspace(0, len(on), count, endpoint=False).astype(np.int64)]
    else:
        extra = count - len(on)
        pick = np.concatenate([on, off[np.linspace(0, len(off), extra, endpoint=False).astype(np.int64)]])
    sel = np.zeros(members.size, dtype=bool)
    sel[pick] = True
    return sel.reshape(members.shape)


def sample_training_centers(mask: np.ndarray, config: SamplerConfig | None = None) -> SampleSet:
    """Select crossover centers densely near the boundary, sparser far outside.

    * every pixel within distance ``B`` of the boundary (either side);
    * interior pixels beyond ``B`` on a ``interior_stride`` grid;
    * exterior pixels in band ``(kB, (k+1)B]`` on a grid of stride
      ``min(max_stride, 2 * ceil(d / B))``, thinned further if needed so the
      per-band density never increases with ``k``.
    """
    config = config or SamplerConfig()
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    rr, cc = np.indices((h, w))
    B = config.boundary_band

    if not mask.any() or mask.all():
        fg = mask.all()
        stride = config.interior_stride if fg else config.max_stride
        sel = (rr % stride == 0) & (cc % stride == 0)
        tag = "interior" if fg else "exterior-far"
        rows, cols = np.nonzero(sel)
        lab = np.full(len(rows), FOREGROUND if fg else BACKGROUND, dtype=np.int64)
        return SampleSet(rows, cols, lab, [tag] * len(rows), warning="single-class mask")

    dist = boundary_distance(mask)
    chosen = np.zeros((h, w), dtype=bool)
    tags = np.empty((h, w), dtype=object)

    band = dist <= B
    chosen |= band
    tags[band] = "boundary-band"

    inner = mask & ~band
    s = config.interior_stride
    isel = inner & (rr % s == 0) & (cc % s == 0)
    chosen |= isel
    tags[isel] = "interior"

    outer = ~mask & ~band
    if outer.any():
        kband = (dist - 1) // B  # band k holds d in (kB, (k+1)B]
        prev_density = 1.0
        for k in range(1, int(kband[outer].max()) + 1):
            members = outer & (kband == k)
            n = int(members.sum())
            if n == 0:
                continue
            stride = config.exterior_stride(k * B + 1)
            # exact per-band count so realized density never increases with k
            count = min(n // (stride * stride), math.floor(prev_density * n + 1e-9))
            sel = _spread(members, (rr % stride == 0) & (cc % stride == 0), count)
            prev_density = count / n
            chosen |= sel
            tags[sel] = f"exterior-band-{k}"

    rows, cols = np.nonzero(chosen)
    labels = mask[rows, cols].astype(np.int64)
    return SampleSet(rows, cols, labels, [str(t) for t in tags[rows, cols]])


def exterior_band_density(mask: np.ndarray, samples: SampleSet, band: int) -> dict[int, float]:
    """Selected fraction of exterior pixels per distance band ``k >= 1``."""
    mask = np.asarray(mask, dtype=bool)
    dist = boundary_distance(mask)
    kband = (dist - 1) // band
    sel = np.zeros(mask.shape, dtype=bool)
    sel[samples.rows, samples.cols] = True
    out: dict[int, float] = {}
    outer = ~mask & (dist > band)
    for k in sorted(set(kband[outer].tolist())):
        members = outer & (kband == k)
        out[int(k)] = float(sel[members].sum()) / float(members.sum())
    return out


def thin_sequence(images: Sequence) -> list:
    """Keep every other frame of a sequence (0-based even positions)."""
    return list(images[::2])
