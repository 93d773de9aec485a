"""Training losses: focal classification, smooth-L1 box regression,
IoU-guided confidence, and the weighted multi-task total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import (
    NumericAbort,
    Tensor,
    add,
    add_const,
    clip,
    constant,
    log,
    mul,
    powc,
    reduce_sum,
    scale,
    sub,
)

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    beta_reg: float = 2.0
    beta_iou: float = 1.0
    beta_ref: float = 1.0
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        for name in ("beta_reg", "beta_iou", "beta_ref", "alpha", "gamma"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossReport:
    l_cls: float
    l_reg: float
    l_iou: float
    l_ref: float
    total: float
    n_positive: int

    def csv_row(self, step: int) -> str:
        return (
            f"{step},{self.l_cls:.9e},{self.l_reg:.9e},{self.l_iou:.9e},"
            f"{self.l_ref:.9e},{self.total:.9e}"
        )


def _clamped(p: Tensor) -> Tensor:
    return clip(p, PROB_EPS, 1.0 - PROB_EPS)


def focal_loss(p: Tensor, alpha_a, gamma: float, n_positive: int) -> Tensor:
    """Sum of -alpha_a * (1 - p)^gamma * log(p) over entries, divided by
    max(1, n_positive).

    ``p`` holds each non-ignored anchor's probability for its assigned
    outcome (the class probability for positives, its complement for
    negatives); ``alpha_a`` is the matching per-entry weight (alpha for
    positives, 1-alpha for negatives).
    """
    pc = _clamped(p)
    one_minus = sub(constant(np.ones_like(pc.data)), pc)  # >= PROB_EPS after clamping
    mod = powc(one_minus, gamma) if gamma != 0.0 else None
    nll = scale(log(pc), -1.0)
    term = mul(nll, mod) if mod is not None else nll
    alpha_arr = np.broadcast_to(np.asarray(alpha_a, dtype=np.float64), pc.data.shape)
    term = mul(term, constant(alpha_arr.copy()))
    return scale(reduce_sum(term), 1.0 / max(1, n_positive))


def smooth_l1(pred: Tensor, target, beta_sl1: float, n_positive: Optional[int] = None) -> Tensor:
    """Huber-style residual loss summed over coordinates, averaged over rows.

    Per coordinate: 0.5 d^2 / beta for |d| < beta, else |d| - 0.5 beta.
    The branch is realized as the algebraic identity
    0.5 d^2/b - 0.5 (max(|d| - b, 0))^2 / b, which keeps a single smooth
    expression on the tape with the correct one-sided derivatives.
    """
    if beta_sl1 <= 0.0:
        raise ValueError("smooth-L1 switch point must be positive")
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    d = sub(pred, constant(target))
    quad = scale(mul(d, d), 0.5 / beta_sl1)
    # excess = max(|d| - beta, 0), built from two ReLU arms
    from .numerics import relu

    exc_pos = relu(add_const(d, -beta_sl1))
    exc_neg = relu(sub(constant(np.full_like(target, -beta_sl1)), d))
    excess = add(exc_pos, exc_neg)
    corr = scale(mul(excess, excess), -0.5 / beta_sl1)
    per_coord = add(quad, corr)
    n_rows = pred.shape[0] if pred.data.ndim == 2 else 1
    denom = max(1, n_positive if n_positive is not None else n_rows)
    return scale(reduce_sum(per_coord), 1.0 / denom)


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Mean BCE between predictions in [0, 1] and soft targets."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    if pred.data.size == 0:
        return constant(np.zeros(()))
    pc = _clamped(pred)
    t = constant(target)
    one_minus_t = constant(1.0 - target)
    pos = mul(t, log(pc))
    neg = mul(one_minus_t, log(sub(constant(np.ones_like(target)), pc)))
    return scale(reduce_sum(add(pos, neg)), -1.0 / pred.data.size)


def iou_confidence_loss(pred_conf: Tensor, targets) -> Tensor:
    """BCE between predicted confidence and the clipped-IoU soft target."""
    return binary_cross_entropy(pred_conf, targets)


@dataclass
class LossTerms:
    """The four in-graph loss components of one training step."""

    l_cls: Tensor
    l_reg: Tensor
    l_iou: Tensor
    l_ref: Tensor
    n_positive: int


def total_loss(terms: LossTerms, weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Weighted sum L = L_cls + b_reg L_reg + b_iou L_iou + b_ref L_ref.

    Raises NumericAbort naming the first non-finite component.
    """
    for name, t in (
        ("l_cls", terms.l_cls),
        ("l_reg", terms.l_reg),
        ("l_iou", terms.l_iou),
        ("l_ref", terms.l_ref),
    ):
        if not np.all(np.isfinite(t.data)):
            raise NumericAbort(f"non-finite loss component {name}")
    total = add(
        add(terms.l_cls, scale(terms.l_reg, weights.beta_reg)),
        add(scale(terms.l_iou, weights.beta_iou), scale(terms.l_ref, weights.beta_ref)),
    )
    report = LossReport(
        l_cls=terms.l_cls.item(),
        l_reg=terms.l_reg.item(),
        l_iou=terms.l_iou.item(),
        l_ref=terms.l_ref.item(),
        total=total.item(),
        n_positive=terms.n_positive,
    )
    return total, report
