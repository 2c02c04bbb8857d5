"""Prediction (cross-entropy), constraint and combined losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import FeatureSlices

LOSS_KINDS = ("full", "entropy_only", "mse_only", "no_end_constraint")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "full"
    lambda_cs: float = 1.0
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lambda_cs < 0:
            raise ValueError("lambda_cs must be >= 0")

    @property
    def uses_constraint(self) -> bool:
        return self.kind in ("full", "no_end_constraint")


def _as_prob(y_hat) -> Tensor:
    t = ad.as_tensor(y_hat)
    if t.data.ndim == 0:
        t = ad.reshape(t, (1,))
    if t.size == 0:
        raise ValueError("empty batch")
    return t


def _effective_eps(eps: float, dtype) -> float:
    # 1 - eps must stay representable below 1 in the working precision
    return max(eps, float(np.finfo(dtype).eps))


def prediction_loss(y_hat, y, epsilon: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    p = _as_prob(y_hat)
    y = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    eps = _effective_eps(epsilon, p.dtype)
    pc = ad.clip(p, eps, 1.0 - eps)
    ll = ad.add(ad.mul(y, ad.log(pc)), ad.mul(1.0 - y, ad.log(ad.sub(1.0, pc))))
    return ad.mul(ad.mean(ll), -1.0)


def mse_loss(y_hat, y) -> Tensor:
    p = _as_prob(y_hat)
    y = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    return ad.mean(ad.square(ad.sub(p, y)))


def constraint_terms(slices: FeatureSlices) -> tuple[Tensor, Tensor]:
    """Per-sample consistency and end (diversity) terms, each >= 0."""
    consistency = ad.frobenius_diff_sq(slices.vc, slices.hc)
    ends = ad.frobenius_diff_sq(slices.ve, slices.he)
    if consistency.data.ndim == 0:
        consistency, ends = ad.reshape(consistency, (1,)), ad.reshape(ends, (1,))
    return consistency, ends


def constraint_loss(slices: FeatureSlices | Sequence[FeatureSlices], config: LossConfig | None = None) -> Tensor:
    """Mean over samples of ||Vc - Hc^T||^2 - ||Ve - He^T||^2 (per-map transposes).

    ``no_end_constraint`` drops the second term.
    """
    config = config or LossConfig()
    if not isinstance(slices, FeatureSlices):
        slices = _stack(slices)
    consistency, ends = constraint_terms(slices)
    if config.kind == "no_end_constraint":
        return ad.mean(consistency)
    return ad.mean(ad.sub(consistency, ends))


def _stack(items: Sequence[FeatureSlices]) -> FeatureSlices:
    def batch(t: Tensor) -> Tensor:
        return ad.reshape(t, (1,) + t.shape) if t.data.ndim == 3 else t

    return FeatureSlices(*(ad.concat([batch(getattr(s, k)) for s in items], axis=0) for k in ("vc", "ve", "hc", "he")))


@dataclass
class LossValue:
    total: Tensor
    prediction: float
    constraint: float


def total_loss(y_hat, y, slices: FeatureSlices | None, config: LossConfig | None = None) -> LossValue:
    """Combined objective for one batch; ``slices`` may be None for losses without L_cs."""
    config = config or LossConfig()
    if config.kind == "mse_only":
        l = mse_loss(y_hat, y)
        return LossValue(l, float(l.data), 0.0)
    pre = prediction_loss(y_hat, y, config.epsilon)
    if config.kind == "entropy_only" or config.lambda_cs == 0.0:
        return LossValue(pre, float(pre.data), 0.0)
    if slices is None:
        raise ValueError(f"loss kind {config.kind!r} needs crossover feature slices")
    cs = constraint_loss(slices, config)
    return LossValue(ad.add(pre, ad.mul(cs, config.lambda_cs)), float(pre.data), float(cs.data))
