"""Declarative branch specs, presets, Xavier init and the forward pass.

A network is one or more branches, each reading one view of the pixel
neighbourhood (``vertical`` L x S block, ``horizontal`` S x L block, or a
``square`` P x P block). Each branch is a conv/pool stack followed by a
500-unit head; the heads are concatenated and mapped to one logit.
With both a vertical and a horizontal branch and a crossover-loss layer
set, the forward pass also returns the feature slices used by the
constraint loss.
"""

from __future__ import annotations

import functools
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .patches import CrossoverPatch
from .receptive import Conv as _RConv
from .receptive import ConfigurationError, FeatureSliceSpec, LayerStack, Pool as _RPool, slice_spec_for_patch


@dataclass(frozen=True)
class ConvLayer:
    kh: int
    kw: int
    maps: int


@dataclass(frozen=True)
class PoolLayer:
    pass


POOL = PoolLayer()


@dataclass(frozen=True)
class BranchSpec:
    view: str  # vertical | horizontal | square
    extent: tuple[int, int]
    layers: tuple
    crossover_layer: int | None = None  # ordinal of a conv layer, 1-based
    head_units: int = 500
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "extent", tuple(self.extent))
        if self.view not in ("vertical", "horizontal", "square"):
            raise ConfigurationError(f"unknown branch view {self.view!r}")
        if self.head_units < 1:
            raise ConfigurationError("head_units must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must satisfy 0 <= p < 1")
        if not any(isinstance(l, ConvLayer) for l in self.layers):
            raise ConfigurationError("a branch needs at least one conv layer")
        self.stack  # validates extents
        if self.crossover_layer is not None:
            self.stack.conv_index(self.crossover_layer)

    @property
    def stack(self) -> LayerStack:
        return LayerStack(
            tuple(_RConv(l.kh, l.kw) if isinstance(l, ConvLayer) else _RPool() for l in self.layers),
            self.extent,
        )

    @property
    def n_conv(self) -> int:
        return sum(isinstance(l, ConvLayer) for l in self.layers)

    def shapes(self) -> list[tuple[int, int, int]]:
        """(maps, rows, cols) after each layer; entry 0 is the input."""
        rows, cols = self.stack.extents(0), self.stack.extents(1)
        maps = [1]
        for l in self.layers:
            maps.append(l.maps if isinstance(l, ConvLayer) else maps[-1])
        return list(zip(maps, rows, cols))

    @property
    def flat_features(self) -> int:
        m, r, c = self.shapes()[-1]
        return m * r * c

    @property
    def crossover_position(self) -> int | None:
        """Layer index (into ``layers``, 1-based) of the crossover-loss conv."""
        if self.crossover_layer is None:
            return None
        return self.stack.conv_index(self.crossover_layer)

    def mirrored(self) -> "BranchSpec":
        """Row/column mirror: kernels transposed, extents swapped."""
        view = {"vertical": "horizontal", "horizontal": "vertical"}.get(self.view, self.view)
        layers = tuple(ConvLayer(l.kw, l.kh, l.maps) if isinstance(l, ConvLayer) else l for l in self.layers)
        return replace(self, view=view, extent=self.extent[::-1], layers=layers)


@dataclass(frozen=True)
class NetworkSpec:
    branches: tuple[BranchSpec, ...]
    long_side: int
    short_side: int
    # inputs enter the network as (pixel - shift) / scale
    input_shift: float = 0.0
    input_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        views = [b.view for b in self.branches]
        if len(set(views)) != len(views) or not views:
            raise ConfigurationError(f"branch views must be distinct and non-empty, got {views}")
        if not self.input_scale > 0:
            raise ConfigurationError("input_scale must be > 0")
        L, S = self.long_side, self.short_side
        for b in self.branches:
            want = {"vertical": (L, S), "horizontal": (S, L)}.get(b.view)
            if want is not None and b.extent != want:
                raise ConfigurationError(f"{b.view} branch extent {b.extent} != patch geometry {want}")
        if self.is_crossover:
            v, h = self.branch("vertical"), self.branch("horizontal")
            if h != v.mirrored():
                raise ConfigurationError("horizontal branch must mirror the vertical branch")
        self.slice_specs()  # validates slice geometry

    @property
    def is_crossover(self) -> bool:
        views = {b.view for b in self.branches}
        return views == {"vertical", "horizontal"}

    def branch(self, view: str) -> BranchSpec:
        for b in self.branches:
            if b.view == view:
                return b
        raise KeyError(view)

    def slice_specs(self) -> tuple[FeatureSliceSpec, FeatureSliceSpec] | None:
        return _slice_specs(self)

    def with_crossover_layer(self, k: int | None) -> "NetworkSpec":
        return replace(self, branches=tuple(replace(b, crossover_layer=k) for b in self.branches))

    def with_input_norm(self, shift: float, scale: float) -> "NetworkSpec":
        return replace(self, input_shift=float(shift), input_scale=float(scale))

    def with_dropout(self, p: float) -> "NetworkSpec":
        return replace(self, branches=tuple(replace(b, dropout=p) for b in self.branches))

    def single(self, view: str) -> "NetworkSpec":
        """The one-branch network built from one branch of this spec."""
        return replace(self, branches=(replace(self.branch(view), crossover_layer=None),))


@functools.lru_cache(maxsize=64)
def _slice_specs(spec: NetworkSpec):
    if not spec.is_crossover:
        return None
    v, h = spec.branch("vertical"), spec.branch("horizontal")
    if v.crossover_layer is None:
        return None
    return slice_spec_for_patch(v.stack, h.stack, spec.long_side, spec.short_side, v.crossover_position, h.crossover_position)


# -- presets ---------------------------------------------------------------

_KIDNEY_LAYERS = (
    ConvLayer(5, 3, 32), POOL, ConvLayer(3, 2, 64), ConvLayer(3, 3, 64), POOL,
    ConvLayer(3, 2, 64), ConvLayer(3, 1, 64), ConvLayer(3, 1, 64), ConvLayer(3, 2, 64),
)

_BREAST_LAYERS = (
    ConvLayer(5, 3, 32), POOL, ConvLayer(3, 2, 64), ConvLayer(3, 3, 64), POOL,
    ConvLayer(3, 2, 64), ConvLayer(3, 3, 64), ConvLayer(3, 3, 64), POOL,
    ConvLayer(3, 2, 64), ConvLayer(3, 1, 64), ConvLayer(3, 1, 64), ConvLayer(3, 2, 64), ConvLayer(3, 3, 64),
)


def crossover_spec(layers, long_side: int, short_side: int, crossover_layer: int | None,
                   head_units: int = 500, dropout: float = 0.1) -> NetworkSpec:
    v = BranchSpec("vertical", (long_side, short_side), layers, crossover_layer, head_units, dropout)
    return NetworkSpec((v, v.mirrored()), long_side, short_side)


def preset_spec(task: str, dropout: float = 0.1) -> NetworkSpec:
    """``kidney_cardiac``: 100 x 20 patches, 7 conv / 2 pool, loss at conv3.
    ``breast``: 340 x 68 patches, 11 conv / 3 pool, loss at conv6."""
    if task in ("kidney_cardiac", "kidney", "cardiac"):
        return crossover_spec(_KIDNEY_LAYERS, 100, 20, 3, dropout=dropout)
    if task == "breast":
        return crossover_spec(_BREAST_LAYERS, 340, 68, 6, dropout=dropout)
    raise ConfigurationError(f"unknown preset {task!r}")


def square_spec(size: int, template: BranchSpec, long_side: int, short_side: int) -> NetworkSpec:
    """Square-patch baseline: the template's depth and pool placement with 3x3 kernels.

    Kernels shrink to the current extent where a 3x3 kernel would not fit.
    """
    layers = []
    ext = size
    for l in template.layers:
        if isinstance(l, ConvLayer):
            k = min(3, ext)
            layers.append(ConvLayer(k, k, l.maps))
            ext = ext - k + 1
        else:
            if ext < 2:
                continue
            layers.append(POOL)
            ext //= 2
    b = BranchSpec("square", (size, size), tuple(layers), None, template.head_units, template.dropout)
    return NetworkSpec((b,), long_side, short_side)


# -- parameters ------------------------------------------------------------

class Params(dict):
    """Ordered ``name -> Tensor`` mapping of all trainable arrays."""

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    @property
    def dtype(self):
        return next(iter(self.values())).dtype


def param_shapes(spec: NetworkSpec) -> dict[str, tuple[tuple[int, ...], int, int]]:
    """name -> (shape, fan_in, fan_out) in initialisation order."""
    out: dict[str, tuple[tuple[int, ...], int, int]] = {}
    heads = 0
    for b in spec.branches:
        cin = 1
        k = 0
        for l in b.layers:
            if isinstance(l, ConvLayer):
                k += 1
                rf = l.kh * l.kw
                out[f"{b.view}.conv{k}.w"] = ((l.maps, cin, l.kh, l.kw), cin * rf, l.maps * rf)
                out[f"{b.view}.conv{k}.b"] = ((l.maps,), 0, 0)
                cin = l.maps
        out[f"{b.view}.head.w"] = ((b.head_units, b.flat_features), b.flat_features, b.head_units)
        out[f"{b.view}.head.b"] = ((b.head_units,), 0, 0)
        heads += b.head_units
    out["classifier.w"] = ((1, heads), heads, 1)
    out["classifier.b"] = ((1,), 0, 0)
    return out


def init_xavier(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64) -> Params:
    """Weights uniform on (-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases zero."""
    params = Params()
    for name, (shape, fan_in, fan_out) in param_shapes(spec).items():
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            a = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-a, a, size=shape).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def zero_params(spec: NetworkSpec, dtype=np.float64) -> Params:
    return Params({n: Tensor(np.zeros(s, dtype=dtype), requires_grad=True) for n, (s, _, _) in param_shapes(spec).items()})


def mirror_params(params: Params, spec: NetworkSpec) -> Params:
    """Parameters for the mirrored network: branches swapped, kernels transposed."""
    swap = {"vertical": "horizontal", "horizontal": "vertical"}
    out = Params()
    for name, t in params.items():
        head, _, rest = name.partition(".")
        if head in swap:
            new = f"{swap[head]}.{rest}"
            arr = t.data
            if ".conv" in name and name.endswith(".w"):
                arr = np.swapaxes(arr, -1, -2)
            elif name.endswith("head.w"):
                b = spec.branch(head)
                m, r, c = b.shapes()[-1]
                arr = arr.reshape(-1, r, c, m).swapaxes(1, 2).reshape(arr.shape[0], -1)
            out[new] = Tensor(np.ascontiguousarray(arr), requires_grad=True)
    units = {b.view: b.head_units for b in spec.branches}
    w = params["classifier.w"].data
    order = [b.view for b in spec.branches]
    pieces = dict(zip(order, np.split(w, np.cumsum([units[v] for v in order])[:-1], axis=1)))
    out["classifier.w"] = Tensor(np.concatenate([pieces[swap.get(v, v)] for v in order], axis=1), requires_grad=True)
    out["classifier.b"] = Tensor(params["classifier.b"].data.copy(), requires_grad=True)
    return Params({k: out[k] for k in params})


# -- forward ---------------------------------------------------------------

@dataclass
class FeatureSlices:
    vc: Tensor
    ve: Tensor
    hc: Tensor
    he: Tensor


@dataclass
class ForwardResult:
    probability: Tensor  # (N,)
    logit: Tensor
    slices: FeatureSlices | None
    features: dict[str, list[Tensor]] = field(default_factory=dict)


def patch_inputs(patch: CrossoverPatch, dtype=np.float64) -> dict[str, np.ndarray]:
    return {
        "vertical": np.asarray(patch.vertical, dtype=dtype)[None, None],
        "horizontal": np.asarray(patch.horizontal, dtype=dtype)[None, None],
    }


def _run_branch(params: Params, b: BranchSpec, x: Tensor, training: bool, rng, keep: bool) -> tuple[Tensor, Tensor | None, list[Tensor]]:
    # activations run channels-last; captured maps are returned maps-first
    captured = None
    feats: list[Tensor] = []
    k = 0
    for l in b.layers:
        if isinstance(l, ConvLayer):
            k += 1
            x = ad.conv2d_nhwc(x, params[f"{b.view}.conv{k}.w"], params[f"{b.view}.conv{k}.b"])
            x = ad.dropout_relu(x, b.dropout, rng, training)
            if k == b.crossover_layer:
                captured = ad.to_nchw(x)
        else:
            x = ad.maxpool_nhwc(x)
        if keep:
            feats.append(ad.to_nchw(x))
    # flattened in (row, col, map) order
    h = ad.dense(ad.reshape(x, (x.shape[0], -1)), params[f"{b.view}.head.w"], params[f"{b.view}.head.b"])
    h = ad.relu(h)
    return h, captured, feats


def forward(
    params: Params,
    spec: NetworkSpec,
    inputs: Mapping[str, np.ndarray] | CrossoverPatch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    keep_features: bool = False,
) -> ForwardResult:
    """Foreground probability per sample plus crossover-loss slices.

    ``inputs`` maps branch view to an ``N x 1 x rows x cols`` array (a
    single :class:`CrossoverPatch` is accepted too).
    """
    if isinstance(inputs, CrossoverPatch):
        inputs = patch_inputs(inputs, params.dtype)
    heads = []
    captured: dict[str, Tensor | None] = {}
    features: dict[str, list[Tensor]] = {}
    for b in spec.branches:
        arr = np.asarray(inputs[b.view])
        if arr.ndim == 2:
            arr = arr[None, None]
        if arr.shape[1:] != (1,) + b.extent:
            raise ConfigurationError(f"{b.view} input shape {arr.shape[1:]} != (1, {b.extent[0]}, {b.extent[1]})")
        arr = arr.astype(params.dtype, copy=False).reshape(arr.shape[0], b.extent[0], b.extent[1], 1)
        if spec.input_shift != 0.0 or spec.input_scale != 1.0:
            dt = params.dtype.type
            arr = (arr - dt(spec.input_shift)) / dt(spec.input_scale)
        x = Tensor(arr)
        h, cap, feats = _run_branch(params, b, x, training, rng, keep_features)
        heads.append(h)
        captured[b.view] = cap
        features[b.view] = feats
    joined = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    logit = ad.dense(joined, params["classifier.w"], params["classifier.b"])
    logit = ad.reshape(logit, (-1,))
    prob = ad.sigmoid(logit)
    slices = None
    specs = spec.slice_specs()
    if specs is not None:
        slices = _slices(captured["vertical"], captured["horizontal"], specs)
    return ForwardResult(prob, logit, slices, features)


def _slices(fv: Tensor, fh: Tensor, specs: tuple[FeatureSliceSpec, FeatureSliceSpec]) -> FeatureSlices:
    out = []
    for fmap, s in zip((fv, fh), specs):
        cidx, eidx, axis = s.index_sets()
        center = ad.getitem(fmap, cidx)
        ends = ad.concat([ad.getitem(fmap, e) for e in eidx], axis=axis)
        out.append((center, ends))
    (vc, ve), (hc, he) = out
    return FeatureSlices(vc, ve, hc, he)


# -- serialization ---------------------------------------------------------

PARAMS_MAGIC = b"CROSSOVER-PARAMS"
PARAMS_VERSION = 1


def save_params(params: Params, path: str | Path, spec: NetworkSpec | None = None) -> None:
    """Versioned container: header line, textual manifest, raw little-endian data.

    Manifest lines are ``name<TAB>dtype<TAB>shape<TAB>offset``; offsets are
    relative to the start of the data section.
    """
    lines = []
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name}\t{le.dtype.str}\t{shape}\t{offset}")
        blobs.append(le.tobytes())
        offset += le.nbytes
    meta = "" if spec is None else json.dumps(spec_to_dict(spec), sort_keys=True)
    manifest = "\n".join(lines).encode()
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC + f" v{PARAMS_VERSION}\n".encode())
        fh.write(f"{len(params)} {len(manifest)} {len(meta.encode())}\n".encode())
        fh.write(manifest + b"\n")
        fh.write(meta.encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_params(path: str | Path) -> tuple[Params, NetworkSpec | None]:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    header = buf.readline()
    if not header.startswith(PARAMS_MAGIC):
        raise ValueError(f"{path}: not a params container")
    version = int(header.split(b" v")[-1])
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    try:
        count, mlen, jlen = (int(v) for v in buf.readline().split())
        manifest = buf.read(mlen).decode()
        buf.read(1)
        meta = buf.read(jlen).decode()
        buf.read(1)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed params header") from exc
    base = buf.tell()
    params = Params()
    for line in manifest.split("\n")[:count]:
        name, dt, shape, off = line.split("\t")
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        dtype = np.dtype(dt)
        n = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        start = base + int(off)
        if start + n > len(raw):
            raise ValueError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(raw, dtype=dtype, count=n // dtype.itemsize, offset=start).reshape(dims)
        params[name] = Tensor(arr.astype(dtype.newbyteorder("="), copy=True), requires_grad=True)
    spec = spec_from_dict(json.loads(meta)) if meta else None
    return params, spec


def spec_to_dict(spec: NetworkSpec) -> dict:
    def layer(l):
        return {"pool": True} if isinstance(l, PoolLayer) else {"kh": l.kh, "kw": l.kw, "maps": l.maps}

    return {
        "long_side": spec.long_side,
        "short_side": spec.short_side,
        "input_shift": spec.input_shift,
        "input_scale": spec.input_scale,
        "branches": [
            {
                "view": b.view, "extent": list(b.extent), "layers": [layer(l) for l in b.layers],
                "crossover_layer": b.crossover_layer, "head_units": b.head_units, "dropout": b.dropout,
            }
            for b in spec.branches
        ],
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    branches = []
    for b in d["branches"]:
        layers = tuple(POOL if l.get("pool") else ConvLayer(l["kh"], l["kw"], l["maps"]) for l in b["layers"])
        branches.append(BranchSpec(b["view"], tuple(b["extent"]), layers, b["crossover_layer"], b["head_units"], b["dropout"]))
    return NetworkSpec(tuple(branches), d["long_side"], d["short_side"], d.get("input_shift", 0.0), d.get("input_scale", 1.0))
