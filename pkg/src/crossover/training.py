"""Mini-batch SGD over sampled patch centers."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .losses import LossConfig, total_loss
from .network import NetworkSpec, Params, forward, init_xavier
from .patches import PatchExtractor, SampleSet

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NonFiniteLoss(TrainingError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass
class TrainConfig:
    epochs: int = 1
    learning_rate: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    shuffle: bool = True
    dtype: str = "float64"
    # keep at most this many background samples per foreground sample
    background_cap: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.background_cap is not None and self.background_cap <= 0:
            raise ValueError("background_cap must be > 0")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    l_pre: float
    l_cs: float
    val_dsc: float | None = None


HISTORY_HEADER = ["epoch", "loss", "l_pre", "l_cs", "val_dsc"]


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    seconds: float = 0.0

    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(HISTORY_HEADER)
            for r in self.records:
                val = "" if r.val_dsc is None else f"{r.val_dsc:.6f}"
                wr.writerow([r.epoch, f"{r.loss:.10g}", f"{r.l_pre:.10g}", f"{r.l_cs:.10g}", val])


@dataclass
class TrainingImage:
    image: np.ndarray
    samples: SampleSet


def branch_inputs(spec: NetworkSpec, extractor: PatchExtractor, centers: np.ndarray) -> dict[str, np.ndarray]:
    """Per-view input stacks for a batch of centers from one image."""
    out: dict[str, np.ndarray] = {}
    views = {b.view: b for b in spec.branches}
    if "vertical" in views or "horizontal" in views:
        v, h = extractor.extract(centers)
        out["vertical"], out["horizontal"] = v, h
    if "square" in views:
        out["square"] = extractor.extract_square(centers, views["square"].extent[0])
    return out


class BatchSource:
    """Flat index over (image, center) pairs; gathers mixed-image batches."""

    def __init__(self, spec: NetworkSpec, data: Sequence[TrainingImage], dtype, rng: np.random.Generator | None = None,
                 background_cap: float | None = None):
        self.spec = spec
        self.extractors = [PatchExtractor(d.image, spec.long_side, spec.short_side, dtype) for d in data]
        img, rows, cols, labels = [], [], [], []
        for i, d in enumerate(data):
            s = d.samples
            img.append(np.full(len(s), i, dtype=np.int64))
            rows.append(np.asarray(s.rows, dtype=np.int64))
            cols.append(np.asarray(s.cols, dtype=np.int64))
            labels.append(np.asarray(s.labels, dtype=np.int64))
        self.img = np.concatenate(img) if img else np.zeros(0, np.int64)
        self.rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
        self.cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
        self.labels = np.concatenate(labels) if labels else np.zeros(0, np.int64)
        if background_cap is not None:
            self._cap_background(background_cap, rng)

    def _cap_background(self, ratio: float, rng) -> None:
        fg = np.flatnonzero(self.labels == 1)
        bg = np.flatnonzero(self.labels == 0)
        limit = int(math.floor(ratio * len(fg)))
        if len(bg) <= limit:
            return
        keep_bg = np.sort(rng.choice(bg, size=limit, replace=False))
        keep = np.sort(np.concatenate([fg, keep_bg]))
        self.img, self.rows, self.cols, self.labels = (a[keep] for a in (self.img, self.rows, self.cols, self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    def gather(self, idx: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Inputs in the order of ``idx``."""
        parts: dict[str, list] = {}
        order = []
        for i in np.unique(self.img[idx]):
            pos = np.flatnonzero(self.img[idx] == i)
            centers = np.stack([self.rows[idx[pos]], self.cols[idx[pos]]], axis=1)
            for k, arr in branch_inputs(self.spec, self.extractors[i], centers).items():
                parts.setdefault(k, []).append(arr)
            order.append(pos)
        inv = np.argsort(np.concatenate(order), kind="stable")
        inputs = {k: np.concatenate(v, axis=0)[inv] for k, v in parts.items()}
        return inputs, self.labels[idx]


def sgd_step(params: Params, learning_rate: float) -> None:
    """theta <- theta - lr * grad, in place."""
    for t in params.values():
        if t.grad is not None:
            t.data -= t.data.dtype.type(learning_rate) * t.grad


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (init, shuffle, dropout) generators derived from one seed."""
    ss = np.random.SeedSequence(int(seed))
    return tuple(np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(3))


def train_step(params: Params, spec: NetworkSpec, inputs, labels, config: TrainConfig, rng):
    params.zero_grad()
    out = forward(params, spec, inputs, training=True, rng=rng)
    lv = total_loss(out.probability, labels, out.slices, config.loss)
    value = float(lv.total.data)
    if math.isfinite(value):
        lv.total.backward()
        sgd_step(params, config.learning_rate)
    return lv, value


def train(
    spec: NetworkSpec,
    data: Sequence[TrainingImage],
    config: TrainConfig,
    valset: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
    params: Params | None = None,
    validate: Callable[[Params], float] | None = None,
) -> tuple[Params, TrainHistory]:
    """Train from Xavier init (or ``params``); returns final parameters and history.

    ``validate`` overrides the default validation (mean DSC of whole-image
    predictions on ``valset``).
    """
    dtype = np.dtype(config.dtype)
    init_rng, shuffle_rng, drop_rng = seed_streams(config.seed)
    source = BatchSource(spec, data, dtype, rng=shuffle_rng, background_cap=config.background_cap)
    if len(source) == 0:
        raise TrainingError("empty training set")
    if len(np.unique(source.labels)) < 2:
        raise TrainingError("training samples contain a single class; need both foreground and background")
    if params is None:
        params = init_xavier(spec, init_rng, dtype)
    if validate is None and valset:
        from .inference import predict_image
        from .metrics import dsc

        def validate(p):
            scores = [dsc(predict_image(p, spec, img).mask, gt) for img, gt in valset]
            return float(np.mean(scores))

    history = TrainHistory()
    start = time.perf_counter()
    n = len(source)
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n) if config.shuffle else np.arange(n)
        tot = pre = cs = 0.0
        for b, s in enumerate(range(0, n, bs), start=1):
            idx = order[s:s + bs]
            inputs, labels = source.gather(idx)
            lv, value = train_step(params, spec, inputs, labels, config, drop_rng)
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, b, value)
            m = len(idx)
            tot += value * m
            pre += lv.prediction * m
            cs += lv.constraint * m
        rec = EpochRecord(epoch, tot / n, pre / n, cs / n)
        if validate is not None:
            rec.val_dsc = validate(params)
        history.records.append(rec)
        logger.info("epoch %d loss %.6f l_pre %.6f l_cs %.6f val %s (%.1fs)", epoch, rec.loss, rec.l_pre, rec.l_cs,
                    rec.val_dsc, time.perf_counter() - start)
    history.seconds = time.perf_counter() - start
    return params, history
