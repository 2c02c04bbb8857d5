"""Receptive-region algebra for stride-1 valid conv / 2x2 pool stacks.

Row (or column) ranges are 1-based and inclusive. A layer index ``l``
refers to the output of the ``l``-th layer of the stack; ``l = 0`` is the
input itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Invalid network / patch configuration."""


@dataclass(frozen=True)
class RowRange:
    start: int
    end: int

    def __post_init__(self):
        if not 1 <= self.start <= self.end:
            raise ValueError(f"invalid range [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def as_slice(self) -> slice:
        return slice(self.start - 1, self.end)

    def __iter__(self):
        yield self.start
        yield self.end


@dataclass(frozen=True)
class Conv:
    kh: int
    kw: int

    def kernel(self, axis: int) -> int:
        return self.kh if axis == 0 else self.kw


@dataclass(frozen=True)
class Pool:
    pass


@dataclass(frozen=True)
class LayerStack:
    layers: tuple
    extent: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for axis in (0, 1):
            for e in self.extents(axis):
                if e < 1:
                    raise ConfigurationError(f"layer stack collapses along axis {axis}: extents {self.extents(axis)}")

    def extents(self, axis: int = 0) -> list[int]:
        """Extent along ``axis`` after each layer; entry 0 is the input."""
        out = [self.extent[axis]]
        for layer in self.layers:
            cur = out[-1]
            out.append(cur - layer.kernel(axis) + 1 if isinstance(layer, Conv) else cur // 2)
        return out

    def conv_positions(self) -> list[int]:
        """Layer indices (1-based) of the conv layers, in order."""
        return [i + 1 for i, layer in enumerate(self.layers) if isinstance(layer, Conv)]

    def conv_index(self, k: int) -> int:
        """Layer index of the ``k``-th conv layer (1-based)."""
        pos = self.conv_positions()
        if not 1 <= k <= len(pos):
            raise ConfigurationError(f"stack has {len(pos)} conv layers, asked for conv {k}")
        return pos[k - 1]


def _check_layer(stack: LayerStack, l: int) -> None:
    if not 0 <= l <= len(stack.layers):
        raise ValueError(f"layer index {l} outside 0..{len(stack.layers)}")


def receptive_range(stack: LayerStack, l: int, r: RowRange, axis: int = 0) -> RowRange:
    """Input positions along ``axis`` that can influence ``r`` at layer ``l``.

    Walks the stack backwards: a height-``k`` conv widens the end by
    ``k - 1``; a pool maps ``[a, b]`` to ``[2a - 1, 2b]``.
    """
    _check_layer(stack, l)
    ext = stack.extents(axis)
    if r.end > ext[l]:
        raise ValueError(f"range {tuple(r)} outside layer {l} extent {ext[l]}")
    lo, hi = r.start, r.end
    for i in range(l, 0, -1):
        layer = stack.layers[i - 1]
        if isinstance(layer, Conv):
            hi = hi + layer.kernel(axis) - 1
        else:
            lo, hi = 2 * lo - 1, min(2 * hi, ext[i - 1])
    return RowRange(max(1, lo), min(hi, ext[0]))


def receptive_rows(stack: LayerStack, l: int, r: RowRange) -> RowRange:
    return receptive_range(stack, l, r, axis=0)


def influence_oracle(stack: LayerStack, l: int, r: RowRange, axis: int = 0) -> RowRange:
    """Brute-force counterpart of :func:`receptive_range`.

    Pushes one boolean indicator per input position forward through the
    stack and reports which of them reach any position of ``r``.
    """
    _check_layer(stack, l)
    n = stack.extent[axis]
    masks = np.eye(n, dtype=bool)  # row i: positions reached by input i
    for layer in stack.layers[:l]:
        m = masks.shape[1]
        if isinstance(layer, Conv):
            k = layer.kernel(axis)
            masks = np.stack([masks[:, j:j + k].any(axis=1) for j in range(m - k + 1)], axis=1)
        else:
            masks = np.stack([masks[:, 2 * j] | masks[:, 2 * j + 1] for j in range(m // 2)], axis=1)
    if r.end > masks.shape[1]:
        raise ValueError(f"range {tuple(r)} outside layer {l} extent {masks.shape[1]}")
    hits = np.flatnonzero(masks[:, r.start - 1:r.end].any(axis=1))
    return RowRange(int(hits[0]) + 1, int(hits[-1]) + 1)


def invert_to_slice(stack: LayerStack, l: int, target: RowRange, axis: int = 0) -> RowRange:
    """Feature range at layer ``l`` whose receptive range best matches ``target``.

    Exhaustive over all ranges; cost is ``|R1 - T1| + |R2 - T2|``, ties go
    to the narrower range, then the one starting first.
    """
    _check_layer(stack, l)
    ext = stack.extents(axis)
    n = ext[l]
    if n < 1:
        raise ValueError(f"layer {l} has empty output")
    if target.end > ext[0]:
        raise ValueError(f"target {tuple(target)} outside input extent {ext[0]}")
    best = None
    best_key = None
    for r1 in range(1, n + 1):
        for r2 in range(r1, n + 1):
            rec = receptive_range(stack, l, RowRange(r1, r2), axis)
            key = (abs(rec.start - target.start) + abs(rec.end - target.end), r2 - r1, r1)
            if best_key is None or key < best_key:
                best_key, best = key, RowRange(r1, r2)
    return best


def overlap_range(long_extent: int, short_extent: int) -> RowRange:
    """Central ``short_extent`` positions of a block of ``long_extent``.

    The block center sits at 0-based offset ``n // 2`` for any extent ``n``,
    and the overlap square is centered on it the same way.
    """
    start = long_extent // 2 - short_extent // 2 + 1
    return RowRange(start, start + short_extent - 1)


@dataclass(frozen=True)
class FeatureSliceSpec:
    """Where F_c and the two F_e live in a branch's crossover-loss feature map.

    ``long_axis`` is 0 for the vertical branch (ends stacked along rows) and
    1 for the horizontal one (ends side by side along columns).
    """

    layer: int
    long_axis: int
    center_rows: RowRange
    center_cols: RowRange
    end_ranges: tuple[RowRange, RowRange]
    feature_extent: tuple[int, int]

    @property
    def center_shape(self) -> tuple[int, int]:
        return (self.center_rows.length, self.center_cols.length)

    @property
    def end_shape(self) -> tuple[int, int]:
        rows, cols = self.center_shape
        if self.long_axis == 0:
            return (2 * rows, cols)
        return (rows, 2 * cols)

    def _end_rect(self, k: int) -> tuple[slice, slice]:
        rng = self.end_ranges[k]
        if self.long_axis == 0:
            return rng.as_slice(), self.center_cols.as_slice()
        return self.center_rows.as_slice(), rng.as_slice()

    def extract(self, fmap: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Slice a ``[... x] maps x rows x cols`` array into (F_c, concatenated F_e)."""
        c = fmap[..., self.center_rows.as_slice(), self.center_cols.as_slice()]
        ends = [fmap[(Ellipsis,) + self._end_rect(k)] for k in (0, 1)]
        axis = -2 if self.long_axis == 0 else -1
        return c, np.concatenate(ends, axis=axis)

    def index_sets(self):
        """(center index, [end index, end index], concat axis) for tensor slicing."""
        center = (Ellipsis, self.center_rows.as_slice(), self.center_cols.as_slice())
        ends = [(Ellipsis,) + self._end_rect(k) for k in (0, 1)]
        return center, ends, (-2 if self.long_axis == 0 else -1)


def branch_slice_spec(stack: LayerStack, l: int, long_axis: int, long_extent: int, short_extent: int) -> FeatureSliceSpec:
    if l != 0 and not isinstance(stack.layers[l - 1], Conv):
        raise ConfigurationError(f"crossover-loss layer {l} is not a conv layer")
    short_axis = 1 - long_axis
    overlap = overlap_range(long_extent, short_extent)
    across = RowRange(1, short_extent)
    along = invert_to_slice(stack, l, overlap, axis=long_axis)
    side = invert_to_slice(stack, l, across, axis=short_axis)
    n = stack.extents(long_axis)[l]
    k = along.length
    if k >= along.start or n - k + 1 <= along.end:
        raise ConfigurationError(
            f"F_c spans {tuple(along)} of {n} feature positions; end slices of height {k} would overlap it"
        )
    ends = (RowRange(1, k), RowRange(n - k + 1, n))
    rows, cols = (along, side) if long_axis == 0 else (side, along)
    extent = (stack.extents(0)[l], stack.extents(1)[l])
    return FeatureSliceSpec(l, long_axis, rows, cols, ends, extent)


def slice_spec_for_patch(
    stack_v: LayerStack, stack_h: LayerStack, long_extent: int, short_extent: int, l: int, l_h: int | None = None
) -> tuple[FeatureSliceSpec, FeatureSliceSpec]:
    """F_c / F_e placements for the vertical and horizontal branches."""
    if not long_extent > short_extent >= 1:
        raise ConfigurationError(f"need L > S >= 1, got L={long_extent}, S={short_extent}")
    if stack_v.extent != (long_extent, short_extent) or stack_h.extent != (short_extent, long_extent):
        raise ConfigurationError(
            f"stack extents {stack_v.extent}/{stack_h.extent} do not match patch {long_extent}x{short_extent}"
        )
    spec_v = branch_slice_spec(stack_v, l, 0, long_extent, short_extent)
    spec_h = branch_slice_spec(stack_h, l if l_h is None else l_h, 1, long_extent, short_extent)
    if spec_v.center_shape != spec_h.center_shape[::-1] or spec_v.end_shape != spec_h.end_shape[::-1]:
        raise ConfigurationError(
            f"vertical slices {spec_v.center_shape}/{spec_v.end_shape} are not transposes of "
            f"horizontal {spec_h.center_shape}/{spec_h.end_shape}"
        )
    return spec_v, spec_h


def random_stack(rng: np.random.Generator, max_depth: int = 6, max_kernel: int = 7, max_extent: int = 64) -> LayerStack:
    """Random legal conv/pool stack, used by the oracle cross-checks."""
    while True:
        depth = int(rng.integers(1, max_depth + 1))
        extent = int(rng.integers(8, max_extent + 1))
        width = int(rng.integers(8, max_extent + 1))
        layers = []
        h, w = extent, width
        for _ in range(depth):
            if rng.random() < 0.3 and h >= 2 and w >= 2:
                layers.append(Pool())
                h, w = h // 2, w // 2
            else:
                kh = int(rng.integers(1, max_kernel + 1))
                kw = int(rng.integers(1, max_kernel + 1))
                if kh > h or kw > w:
                    break
                layers.append(Conv(kh, kw))
                h, w = h - kh + 1, w - kw + 1
        if layers:
            return LayerStack(tuple(layers), (extent, width))


def random_range(rng: np.random.Generator, n: int) -> RowRange:
    a, b = sorted(int(v) for v in rng.integers(1, n + 1, size=2))
    return RowRange(a, b)


def cross_check(count: int, seed: int = 0) -> tuple[int, int]:
    """Compare :func:`receptive_range` with the oracle on random cases.

    Returns ``(cases, mismatches)``; both axes and every layer are probed.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    mismatches = 0
    cases = 0
    for _ in range(count):
        stack = random_stack(rng)
        for axis in (0, 1):
            ext = stack.extents(axis)
            for l in range(len(stack.layers) + 1):
                r = random_range(rng, ext[l])
                cases += 1
                if receptive_range(stack, l, r, axis) != influence_oracle(stack, l, r, axis):
                    mismatches += 1
    return cases, mismatches


def conv_stack(kernels: Sequence, extent: tuple[int, int]) -> LayerStack:
    """Build a stack from a compact list: ``(kh, kw)`` tuples or ``"pool"``."""
    layers = [Pool() if k == "pool" else Conv(*k) for k in kernels]
    return LayerStack(tuple(layers), extent)
