"""Small reverse-mode autodiff engine over numpy arrays.

Tensors carry an optional leading batch axis: feature stacks are either
``maps x rows x cols`` or ``batch x maps x rows x cols``. Every operator
records a closure that pushes the output gradient back to its parents;
:meth:`Tensor.backward` walks the graph in reverse topological order.

Reductions that must be bit-reproducible go through :func:`seqsum`, a
strictly left-to-right (row-major) summation.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operator inputs have incompatible shapes."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def seqsum(values: np.ndarray, axis: int | None = None) -> np.ndarray:
    """Sum in strict row-major order (no pairwise blocking).

    ``np.sum`` uses pairwise summation whose grouping depends on array
    length; ``cumsum`` accumulates sequentially, so its last element is the
    plain loop sum.
    """
    values = np.asarray(values)
    if axis is None:
        flat = values.reshape(-1)
        if flat.size == 0:
            return np.zeros((), dtype=values.dtype)
        return np.cumsum(flat)[-1]
    if values.shape[axis] == 0:
        return np.zeros(np.delete(values.shape, axis), dtype=values.dtype)
    return np.take(np.cumsum(values, axis=axis), -1, axis=axis)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _op: str = ""):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[], None] | None = None
        self._op = _op

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf.

        The graph is released afterwards: a second call on the same loss
        only seeds its own gradient.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        self.grad = np.array(grad, dtype=self.data.dtype) + (0 if self.grad is None else self.grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()
        for node in order:
            if node._parents:
                # drop the closure so the graph (a reference cycle) is freed now
                node.grad = None
                node._backward = None
                node._parents = ()

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation only)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor(data, _op=op)
    live = tuple(p for p in parents if p.requires_grad) if _GRAD_ENABLED[0] else ()
    out.requires_grad = bool(live)
    out._parents = live
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad, b.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-out.grad, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * a.data, b.shape))
        out._backward = _bw
    return out


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _result(np.log(x.data), (x,), "log")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(out.grad / x.data)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    x = as_tensor(x)
    out = _result(np.clip(x.data, lo, hi), (x,), "clip")
    if out.requires_grad:
        inside = (x.data >= lo) & (x.data <= hi)
        out._backward = lambda: x._accumulate(out.grad * inside)
    return out


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _result(x.data * x.data, (x,), "square")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(2.0 * x.data * out.grad)
    return out


# -- reductions and reshaping ----------------------------------------------

def tsum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _result(np.asarray(seqsum(x.data)), (x,), "sum")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(np.broadcast_to(out.grad, x.shape))
    return out


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = _result(np.asarray(seqsum(x.data) / n), (x,), "mean")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(np.broadcast_to(out.grad / n, x.shape))
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = _result(x.data.reshape(tuple(shape)), (x,), "reshape")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(out.grad.reshape(x.shape))
    return out


def flatten(x: Tensor, batched: bool | None = None) -> Tensor:
    """Flatten to ``(batch, features)`` (4D input) or ``(features,)``."""
    if batched is None:
        batched = x.data.ndim == 4
    if batched:
        return reshape(x, (x.shape[0], -1))
    return reshape(x, (-1,))


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    out = _result(x.data[idx], (x,), "getitem")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad) if _has_fancy(idx) else _slice_add(g, idx, out.grad)
            x._accumulate(g)
        out._backward = _bw
    return out


def _has_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _slice_add(g: np.ndarray, idx, val: np.ndarray) -> None:
    g[idx] += val


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in ts], axis=axis), ts, "concat")
    if out.requires_grad:
        bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

        def _bw():
            for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    t._accumulate(out.grad[tuple(sl)])
        out._backward = _bw
    return out


def transpose_maps(x: Tensor) -> Tensor:
    """Transpose each 2D feature map (swap the last two axes)."""
    x = as_tensor(x)
    out = _result(np.swapaxes(x.data, -1, -2), (x,), "transpose_maps")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(np.swapaxes(out.grad, -1, -2))
    return out


# -- network operators -----------------------------------------------------
#
# The *_nhwc kernels work channels-last (batch x rows x cols x maps), which
# keeps im2col copies and gradient scatter on contiguous memory. The public
# operators take maps-first arrays and wrap them.

def _as_batched(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"{what}: expected maps x rows x cols (optionally batched), got shape {x.shape}")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), "permute")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(out.grad.transpose(inv))
    return out


def to_nhwc(x: Tensor) -> Tensor:
    return permute(x, (0, 2, 3, 1))


def to_nchw(x: Tensor) -> Tensor:
    return permute(x, (0, 3, 1, 2))


def conv2d_nhwc(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Channels-last valid convolution; ``kernels`` stay ``Cout x Cin x kh x kw``."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape} / {kernels.shape}")
    cout, cin, kh, kw = kernels.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d_valid: input has {c} maps but kernels expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_valid: bias shape {bias.shape} != ({cout},)")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d_valid: kernel {kh}x{kw} larger than input {h}x{w}")
    ho, wo = h - kh + 1, w - kw + 1
    xd = x.data
    cols = np.empty((n, ho, wo, kh, kw, cin), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xd[:, i:i + ho, j:j + wo, :]
    cols = cols.reshape(n * ho * wo, kh * kw * cin)
    wmat = np.ascontiguousarray(kernels.data.transpose(0, 2, 3, 1)).reshape(cout, kh * kw * cin)
    res = cols @ wmat.T
    res += bias.data
    out = _result(res.reshape(n, ho, wo, cout), (x, kernels, bias), "conv2d")
    if out.requires_grad:
        def _bw():
            gmat = out.grad.reshape(n * ho * wo, cout)
            if kernels.requires_grad:
                dw = (gmat.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
                kernels._accumulate(dw)
            if bias.requires_grad:
                bias._accumulate(gmat.sum(axis=0))
            if x.requires_grad:
                dcols = (gmat @ wmat).reshape(n, ho, wo, kh, kw, cin)
                dx = np.zeros_like(xd)
                for i in range(kh):
                    for j in range(kw):
                        dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
                x._accumulate(dx)
        out._backward = _bw
    return out


def maxpool_nhwc(x: Tensor) -> Tensor:
    """Channels-last 2x2 max-pool, first maximum (row-major) wins ties."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2x2: input {h}x{w} smaller than 2x2")
    ho, wo = h // 2, w // 2
    xd = x.data
    v = xd[:, : 2 * ho, : 2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    cands = (v[:, :, 0, :, 0], v[:, :, 0, :, 1], v[:, :, 1, :, 0], v[:, :, 1, :, 1])
    best = np.maximum(np.maximum(cands[0], cands[1]), np.maximum(cands[2], cands[3]))
    out = _result(best, (x,), "maxpool2x2")
    if out.requires_grad:
        def _bw():
            dx = np.zeros_like(xd)
            dv = dx[:, : 2 * ho, : 2 * wo, :].reshape(n, ho, 2, wo, 2, c)
            g = out.grad
            free = np.ones(best.shape, dtype=bool)
            for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                hit = free & (cands[k] == best)
                dv[:, :, di, :, dj] = g * hit
                free &= ~hit
            x._accumulate(dx)
        out._backward = _bw
    return out


def conv2d_valid(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, unpadded cross-correlation summed over input maps, plus bias.

    ``x``: ``Cin x H x W`` or ``N x Cin x H x W``; ``kernels``:
    ``Cout x Cin x kh x kw``; ``bias``: ``Cout``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    _, batched = _as_batched(x.data, "conv2d_valid input")
    if kernels.data.ndim != 4:
        raise ShapeError(f"conv2d_valid: kernels must be Cout x Cin x kh x kw, got {kernels.shape}")
    xb = x if batched else reshape(x, (1,) + x.shape)
    out = to_nchw(conv2d_nhwc(to_nhwc(xb), kernels, as_tensor(bias)))
    return out if batched else reshape(out, out.shape[1:])


def maxpool2x2(x: Tensor) -> Tensor:
    """Disjoint 2x2 max-pool; trailing odd row/column dropped.

    Gradient goes to the first maximal element of each window in row-major
    order.
    """
    x = as_tensor(x)
    _, batched = _as_batched(x.data, "maxpool2x2 input")
    xb = x if batched else reshape(x, (1,) + x.shape)
    out = to_nchw(maxpool_nhwc(to_nhwc(xb)))
    return out if batched else reshape(out, out.shape[1:])


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = _result(x.data * pos, (x,), "relu")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(out.grad * pos)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    out = _result(s, (x,), "sigmoid")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(out.grad * s * (1.0 - s))
    return out


_KEEP_BITS = 16


def _keep_mask(rng: np.random.Generator, shape, p: float) -> tuple[np.ndarray, float]:
    # 16-bit uniform draws: the drop rate is p rounded to a multiple of 2**-16
    n = int(np.prod(shape))
    cut = int(round(p * (1 << _KEEP_BITS)))
    draws = np.frombuffer(rng.bytes(2 * n), dtype="<u2").reshape(shape)
    return draws >= cut, 1.0 - cut / (1 << _KEEP_BITS)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= p < 1, got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep, kept = _keep_mask(rng, x.shape, p)
    factor = keep * x.dtype.type(1.0 / kept)
    out = _result(x.data * factor, (x,), "dropout")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(out.grad * factor)
    return out


def dropout_relu(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """``relu(dropout(x))`` in one pass; same random stream as :func:`dropout`."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= p < 1, got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return relu(x)
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep, kept = _keep_mask(rng, x.shape, p)
    keep &= x.data > 0
    factor = keep * x.dtype.type(1.0 / kept)
    out = _result(x.data * factor, (x,), "dropout_relu")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(out.grad * factor)
    return out


def pointwise(x: Tensor, kind: str, p: float = 0.0, rng=None, training: bool = False) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "dropout":
        return dropout(x, p, rng, training)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``W x + b``; 2D input is treated as a batch of rows."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.data.ndim != 2:
        raise ShapeError(f"dense: weights must be n x m, got {weights.shape}")
    nout, m = weights.shape
    batched = x.data.ndim == 2
    xm = x.data if batched else x.data.reshape(1, -1)
    if xm.shape[1] != m:
        raise ShapeError(f"dense: input length {xm.shape[1]} != weight columns {m}")
    if bias.shape != (nout,):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({nout},)")
    res = xm @ weights.data.T + bias.data
    out = _result(res if batched else res[0], (x, weights, bias), "dense")
    if out.requires_grad:
        def _bw():
            g = out.grad if batched else out.grad[None]
            if weights.requires_grad:
                weights._accumulate(g.T @ xm)
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=0))
            if x.requires_grad:
                dx = g @ weights.data
                x._accumulate(dx if batched else dx.reshape(x.shape))
        out._backward = _bw
    return out


def frobenius_diff_sq(a: Tensor, b: Tensor) -> Tensor:
    """Sum over maps of ||a_c - b_c^T||_F^2.

    ``a``: ``C x p x q``, ``b``: ``C x q x p``; with a leading batch axis the
    result is one value per sample. Entries are summed in row-major order.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (3, 4) or a.data.ndim != b.data.ndim:
        raise ShapeError(f"frobenius_diff_sq: need matching 3D/4D inputs, got {a.shape} and {b.shape}")
    bt = np.swapaxes(b.data, -1, -2)
    if a.shape != bt.shape:
        raise ShapeError(f"frobenius_diff_sq: {a.shape} incompatible with per-map transpose of {b.shape}")
    d = a.data - bt
    sq = d * d
    if a.data.ndim == 3:
        val = np.asarray(seqsum(sq))
    else:
        val = seqsum(sq.reshape(sq.shape[0], -1), axis=1)
    out = _result(val, (a, b), "frobenius_diff_sq")
    if out.requires_grad:
        def _bw():
            g = out.grad if a.data.ndim == 3 else out.grad.reshape(-1, 1, 1, 1)
            ga = 2.0 * d * g
            if a.requires_grad:
                a._accumulate(ga)
            if b.requires_grad:
                b._accumulate(-np.swapaxes(ga, -1, -2))
        out._backward = _bw
    return out


# -- finite-difference verification ---------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: int
    worst: tuple[str, tuple[int, ...]] | None = None
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def passed(self, tolerance: float) -> bool:
        return self.ok and self.max_rel_err < tolerance


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    step: float = 1e-6,
    tolerance: float = 1e-6,
    per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` rebuilds the scalar loss from the current parameter values (it must
    be deterministic). ``per_param`` limits how many entries are probed per
    tensor; the probed entries are drawn from ``rng``. The relative error is
    ``|g - fd| / max(1, |fd|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    named = params.items() if isinstance(params, dict) else ((str(i), p) for i, p in enumerate(params))
    named = list(named)
    rng = rng or make_rng(0)
    for _, p in named:
        p.grad = None
    loss = f()
    report = GradCheckReport(max_rel_err=0.0, checked=0)
    if not np.isfinite(loss.data).all():
        report.failures.append("loss is not finite")
        return report
    loss.backward()
    for name, p in named:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        if per_param is None or per_param >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = np.sort(rng.choice(flat.size, size=per_param, replace=False))
        for k in idxs:
            orig = flat[k]
            flat[k] = orig + step
            fp = float(f().data)
            flat[k] = orig - step
            fm = float(f().data)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.failures.append(f"{name}[{k}]: non-finite loss under perturbation")
                continue
            fd = (fp - fm) / (2.0 * step)
            g = float(analytic.reshape(-1)[k])
            err = abs(g - fd) / max(1.0, abs(fd))
            report.checked += 1
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = (name, tuple(int(v) for v in np.unravel_index(k, p.shape)))
    if report.max_rel_err >= tolerance:
        logger.info("gradient check worst %.3e at %s", report.max_rel_err, report.worst)
    return report


def parameters(items: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in items if t.requires_grad]
