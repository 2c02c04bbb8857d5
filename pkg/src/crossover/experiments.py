"""Pipeline wiring shared by the CLI, the ablation harness and the benchmarks."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, _float_pair
from .dataio import SyntheticSpec, iter_split, load_mask, synth_generate
from .inference import Prediction, predict_image
from .losses import LossConfig
from .metrics import dsc
from .network import NetworkSpec, Params, preset_spec, square_spec
from .patches import SampleSet, SamplerConfig, sample_training_centers
from .receptive import ConfigurationError
from .training import NonFiniteLoss, TrainConfig, TrainHistory, TrainingImage, train

logger = logging.getLogger(__name__)


@dataclass
class Example:
    image_id: str
    image: np.ndarray
    mask: np.ndarray


@dataclass
class Dataset:
    train: list[Example]
    test: list[Example]


def synthetic_spec(cfg: ExperimentConfig) -> SyntheticSpec:
    d = cfg.data
    return SyntheticSpec(
        height=d.height, width=d.width, blob_count=d.blob_count, radius=d.radius, blur_sigma=d.blur_sigma,
        contrast=d.contrast, noise_sigma=d.noise_sigma, distractor_count=d.distractors,
        distractor_width=d.distractor_width, seed=d.seed,
    )


def synthetic_splits(cfg: ExperimentConfig) -> list[str]:
    return ["train" if i < cfg.data.train_count else "test" for i in range(cfg.data.count)]


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data.manifest:
        tr = [Example(i, img, m) for i, img, m in iter_split(cfg.data.manifest, "train")]
        te = [Example(i, img, m) for i, img, m in iter_split(cfg.data.manifest, "test")]
    else:
        pairs = synth_generate(synthetic_spec(cfg), cfg.data.count)
        ex = [Example(f"img_{i:04d}", img, m) for i, (img, m) in enumerate(pairs)]
        tr, te = ex[:cfg.data.train_count], ex[cfg.data.train_count:]
    if not tr:
        raise ValueError("dataset has no training images")
    return Dataset(tr, te)


def input_norm(cfg: ExperimentConfig, train_images: Sequence[np.ndarray]) -> tuple[float, float]:
    mode = cfg.network.input_norm
    if mode == "none":
        return 0.0, 1.0
    if mode == "auto":
        pix = np.concatenate([np.asarray(im, dtype=np.float64).ravel() for im in train_images])
        sd = float(pix.std())
        return float(pix.mean()), (sd if sd > 0 else 1.0)
    return _float_pair(mode)


def network_spec(cfg: ExperimentConfig, train_images: Sequence[np.ndarray]) -> NetworkSpec:
    net = preset_spec(cfg.network.preset, dropout=cfg.network.dropout)
    if (net.long_side, net.short_side) != (cfg.patch.long, cfg.patch.short):
        raise ConfigurationError(
            f"preset {cfg.network.preset!r} expects patch {net.long_side}x{net.short_side}, "
            f"config has {cfg.patch.long}x{cfg.patch.short}")
    net = net.with_crossover_layer(cfg.network.crossover_layer)
    return net.with_input_norm(*input_norm(cfg, train_images))


def sampler_config(cfg: ExperimentConfig) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(s.boundary_band, s.interior_stride, s.max_stride)


def train_config(cfg: ExperimentConfig, seed: int | None = None, loss_kind: str | None = None) -> TrainConfig:
    t, l = cfg.train, cfg.loss
    loss = LossConfig(loss_kind or l.kind, l.lambda_cs, l.epsilon)
    return TrainConfig(t.epochs, t.learning_rate, t.batch_size, cfg.seed if seed is None else seed, loss, t.shuffle,
                       t.dtype, t.background_cap)


def sample_dataset(cfg: ExperimentConfig, examples: Sequence[Example]) -> list[SampleSet]:
    sc = sampler_config(cfg)
    out = []
    for ex in examples:
        s = sample_training_centers(ex.mask, sc)
        if s.warning:
            logger.warning("%s: %s", ex.image_id, s.warning)
        out.append(s)
    return out


def training_set(examples: Sequence[Example], samples: Sequence[SampleSet]) -> list[TrainingImage]:
    return [TrainingImage(e.image, s) for e, s in zip(examples, samples)]


def predict_all(cfg: ExperimentConfig, params: Params, net: NetworkSpec, examples: Sequence[Example]) -> list[Prediction]:
    inf = cfg.inference
    roi = load_mask(inf.roi) if inf.roi else None
    return [
        predict_image(params, net, e.image, roi=roi, stride=inf.stride, threshold=inf.threshold,
                      anchor=(inf.anchor_row, inf.anchor_col), batch_size=inf.batch_size)
        for e in examples
    ]


def fit(cfg: ExperimentConfig, net: NetworkSpec, data: Sequence[TrainingImage], seed: int | None = None,
        loss_kind: str | None = None) -> tuple[Params, TrainHistory]:
    return train(net, data, train_config(cfg, seed, loss_kind))


# -- ablation --------------------------------------------------------------

SQUARE_SIZES = {"square28": 28, "square56": 56, "square100": 100}
LOSS_VARIANTS = ("mse_only", "entropy_only", "full", "no_end_constraint")
VARIANTS = tuple(SQUARE_SIZES) + ("vertical", "horizontal", "vh_average") + LOSS_VARIANTS


@dataclass
class VariantResult:
    variant: str
    seed: int
    scores: list[float]
    note: str = ""

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.scores)) if self.scores else float("nan")


def variant_network(variant: str, base: NetworkSpec) -> tuple[NetworkSpec, str | None]:
    """Network and loss kind for one ablation variant (``vh_average`` has no own network)."""
    if variant in SQUARE_SIZES:
        sq = square_spec(SQUARE_SIZES[variant], base.branch("vertical"), base.long_side, base.short_side)
        return sq.with_input_norm(base.input_shift, base.input_scale), "entropy_only"
    if variant in ("vertical", "horizontal"):
        return base.single(variant), "entropy_only"
    if variant in LOSS_VARIANTS:
        return base, variant
    raise ConfigurationError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")


def middle_conv(net: NetworkSpec) -> int:
    return math.ceil(net.branch("vertical").n_conv / 2)


def run_ablation(cfg: ExperimentConfig, dataset: Dataset | None = None, variants: Sequence[str] | None = None,
                 seeds: Sequence[int] | None = None, layer_sweep: bool | None = None,
                 prior: Sequence[VariantResult] = ()):
    """Train/evaluate every requested variant on one shared sample set.

    Returns ``(results, sweep)``: per (variant, seed) scores and per
    (crossover layer, seed) scores for the full loss. ``prior`` results
    (same config and data) are reused instead of retraining.
    """
    known = {(r.variant, r.seed): r for r in prior}
    dataset = dataset or load_dataset(cfg)
    variants = tuple(variants or cfg.ablate.variants)
    seeds = tuple(seeds if seeds is not None else cfg.ablate.seeds)
    sweep_on = cfg.ablate.layer_sweep if layer_sweep is None else layer_sweep
    for v in variants:
        if v not in VARIANTS:
            raise ConfigurationError(f"unknown ablation variant {v!r}; expected one of {VARIANTS}")
    base = network_spec(cfg, [e.image for e in dataset.train])
    samples = sample_dataset(cfg, dataset.train)
    data = training_set(dataset.train, samples)
    gts = [e.mask for e in dataset.test]

    results: list[VariantResult] = []
    for seed in seeds:
        probs: dict[str, list[np.ndarray]] = {}
        need = list(variants)
        if "vh_average" in need:
            need = [v for v in need if v != "vh_average"]
            for v in ("vertical", "horizontal"):
                if v not in need:
                    need.append(v)
        for v in need:
            if (v, seed) in known and v in variants and not ("vh_average" in variants and v in ("vertical", "horizontal")):
                results.append(known[(v, seed)])
                continue
            net, kind = variant_network(v, base)
            logger.info("ablation: variant %s seed %d", v, seed)
            try:
                params, _ = fit(cfg, net, data, seed, kind)
            except NonFiniteLoss as exc:
                # a diverged run is a result too: no scores, reason in the note
                logger.warning("ablation: variant %s seed %d diverged: %s", v, seed, exc)
                if v in variants:
                    results.append(VariantResult(v, seed, [], note=f"seed {seed}: {exc}"))
                continue
            preds = predict_all(cfg, params, net, dataset.test)
            probs[v] = [p.probability for p in preds]
            if v in variants:
                results.append(VariantResult(v, seed, [dsc(p.mask, g) for p, g in zip(preds, gts)]))
        if "vh_average" in variants and not {"vertical", "horizontal"} <= probs.keys():
            results.append(VariantResult("vh_average", seed, [], note=f"seed {seed}: a single-view run diverged"))
        elif "vh_average" in variants:
            thr = cfg.inference.threshold
            masks = [(a + b) / 2.0 >= thr for a, b in zip(probs["vertical"], probs["horizontal"])]
            results.append(VariantResult("vh_average", seed, [dsc(m, g) for m, g in zip(masks, gts)]))
    results.sort(key=lambda r: variants.index(r.variant))  # stable: seeds stay in run order

    sweep: list[VariantResult] = []
    if sweep_on:
        for k in range(1, middle_conv(base) + 1):
            for seed in seeds:
                name = f"conv{k}"
                try:
                    net = base.with_crossover_layer(k)
                except ConfigurationError as exc:
                    sweep.append(VariantResult(name, seed, [], note=" ".join(str(exc).split())))
                    continue
                try:
                    params, _ = fit(cfg, net, data, seed, "full")
                except NonFiniteLoss as exc:
                    sweep.append(VariantResult(name, seed, [], note=f"seed {seed}: {exc}"))
                    continue
                preds = predict_all(cfg, params, net, dataset.test)
                sweep.append(VariantResult(name, seed, [dsc(p.mask, g) for p, g in zip(preds, gts)]))
    return results, sweep


ABLATION_HEADER = ["variant", "mean_dsc", "n_seeds", "seed_dsc", "note"]


def write_ablation(results: Sequence[VariantResult], path: str | Path) -> None:
    """One row per variant: mean over seeds, and the per-seed means joined by ``;``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ABLATION_HEADER)
        order: list[str] = []
        for r in results:
            if r.variant not in order:
                order.append(r.variant)
        for name in order:
            rows = [r for r in results if r.variant == name]
            valid = [r.mean_dsc for r in rows if r.scores]
            mean = float(np.mean(valid)) if valid else float("nan")
            per_seed = ";".join(f"{r.seed}:{_fmt(r.mean_dsc)}" for r in rows)
            note = "; ".join(sorted({r.note for r in rows if r.note}))
            wr.writerow([name, _fmt(mean), len(rows), per_seed, note])


def summary(results: Sequence[VariantResult]) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in results:
        if r.scores:
            out.setdefault(r.variant, []).append(r.mean_dsc)
    return {k: float(np.mean(v)) for k, v in out.items()}


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.6f}"
