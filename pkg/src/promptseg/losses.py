"""Segmentation, text-alignment, and relation losses with analytic gradients.

Every loss that participates in training comes in two flavours: a plain value
function and a ``*_grad`` variant returning ``(value, dvalue/dprobs)`` (or
``dvalue/dbias`` for the text loss).  Gradients are exact derivatives of the
clamped formulas, so they match central finite differences everywhere except
on the clamp boundaries themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, ShapeMismatch
from .grids import LabelMap, LogitTensor, softmax_channels


@dataclass
class LossConfig:
    epsilon: float = 1e-5          # Dice smoothing
    gamma: float = 2.0             # focal exponent
    lambda_text: float = 0.2
    lambda_rel: float = 0.2
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if self.epsilon <= 0 or self.gamma < 0:
            raise LengthMismatch("epsilon must be > 0 and gamma >= 0")
        if self.lambda_text < 0 or self.lambda_rel < 0:
            raise LengthMismatch("loss weights must be >= 0")
        if not 0 < self.prob_clamp < 0.5:
            raise LengthMismatch("prob_clamp must be in (0, 0.5)")


@dataclass
class LossBreakdown:
    dice: float = 0.0
    ce: float = 0.0
    focal: float = 0.0
    seg: float = 0.0
    text: float = 0.0
    rel: float = 0.0
    total: float = 0.0

    FIELDS = ("dice", "ce", "focal", "seg", "text", "rel", "total")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


def _check_pair(probs: LogitTensor, onehot: LogitTensor):
    if probs.data.shape != onehot.data.shape:
        raise ShapeMismatch(
            f"probs {probs.data.shape} vs targets {onehot.data.shape}"
        )


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Chain dL/dprobs back through a channel softmax to dL/dlogits."""
    inner = (dprobs * probs).sum(axis=0, keepdims=True)
    return probs * (dprobs - inner)


# --- Dice -------------------------------------------------------------

def dice_loss_grad(probs: LogitTensor, onehot: LogitTensor, eps: float = 1e-5):
    """Squared-denominator soft Dice, per class then averaged over all channels."""
    _check_pair(probs, onehot)
    p = probs.data
    g = onehot.data
    c = p.shape[0]
    axes = (1, 2, 3)
    num = 2.0 * (p * g).sum(axis=axes) + eps
    den = (p * p).sum(axis=axes) + (g * g).sum(axis=axes) + eps
    loss = float(np.mean(1.0 - num / den))
    # d/dp[v] of -(num/den) for the voxel's own class term
    grad = -(2.0 * g * den[:, None, None, None] - num[:, None, None, None] * 2.0 * p)
    grad /= den[:, None, None, None] ** 2
    grad /= c
    return loss, grad


def dice_loss(probs: LogitTensor, onehot: LogitTensor, eps: float = 1e-5) -> float:
    return dice_loss_grad(probs, onehot, eps)[0]


# --- Cross entropy / focal --------------------------------------------

def cross_entropy_grad(probs: LogitTensor, onehot: LogitTensor, clamp: float = 1e-7):
    _check_pair(probs, onehot)
    p = probs.data
    g = onehot.data
    n = p[0].size
    p_true = (p * g).sum(axis=0)
    p_safe = np.maximum(p_true, clamp)
    loss = float(-np.log(p_safe).sum() / n)
    live = (p_true > clamp).astype(np.float64)
    grad = -g * (live / p_safe)[None] / n
    return loss, grad


def cross_entropy(probs: LogitTensor, onehot: LogitTensor, clamp: float = 1e-7) -> float:
    return cross_entropy_grad(probs, onehot, clamp)[0]


def focal_loss_grad(
    probs: LogitTensor, onehot: LogitTensor, gamma: float = 2.0, clamp: float = 1e-7
):
    _check_pair(probs, onehot)
    p = probs.data
    g = onehot.data
    n = p[0].size
    p_safe = np.maximum(p, clamp)
    logp = np.log(p_safe)
    q = 1.0 - p
    loss = float(-(np.power(q, gamma) * g * logp).sum() / n)
    live = (p > clamp).astype(np.float64)
    if gamma > 0:
        term1 = np.where(q > 0, gamma * np.power(q, gamma - 1.0) * logp, 0.0)
    else:
        term1 = np.zeros_like(p)
    grad = g * (term1 - np.power(q, gamma) * live / p_safe) / n
    return loss, grad


def focal_loss(
    probs: LogitTensor, onehot: LogitTensor, gamma: float = 2.0, clamp: float = 1e-7
) -> float:
    return focal_loss_grad(probs, onehot, gamma, clamp)[0]


def dice_focal(probs: LogitTensor, onehot: LogitTensor, cfg: LossConfig) -> float:
    return dice_loss(probs, onehot, cfg.epsilon) + focal_loss(
        probs, onehot, cfg.gamma, cfg.prob_clamp
    )


def dice_ce(probs: LogitTensor, onehot: LogitTensor, cfg: LossConfig) -> float:
    return dice_loss(probs, onehot, cfg.epsilon) + cross_entropy(
        probs, onehot, cfg.prob_clamp
    )


# --- Text alignment ----------------------------------------------------

def text_alignment_grad(bias: np.ndarray, presence: np.ndarray, clamp: float = 1e-7):
    """BCE between sigmoid(per-class bias) and the prompt presence vector.

    Background (index 0) is excluded from the sum; normalization is by the
    number of summed classes.
    """
    bias = np.asarray(bias, dtype=np.float64)
    presence = np.asarray(presence, dtype=np.float64)
    if bias.shape != presence.shape:
        raise LengthMismatch(f"bias {bias.shape} vs presence {presence.shape}")
    b = bias[1:]
    y = presence[1:]
    k = b.size
    sig = 1.0 / (1.0 + np.exp(-b))
    pos = np.log(np.maximum(sig, clamp))
    neg = np.log(np.maximum(1.0 - sig, clamp))
    loss = float(-(y * pos + (1.0 - y) * neg).sum() / k)
    live_pos = (sig > clamp).astype(np.float64)
    live_neg = (1.0 - sig > clamp).astype(np.float64)
    grad = np.zeros_like(bias)
    grad[1:] = -(y * (1.0 - sig) * live_pos - (1.0 - y) * sig * live_neg) / k
    return loss, grad


def text_alignment_loss(bias: np.ndarray, presence: np.ndarray, clamp: float = 1e-7) -> float:
    return text_alignment_grad(bias, presence, clamp)[0]


# --- Relation-aware masked CE ------------------------------------------

def relation_bce_from_probs(
    probs: np.ndarray,
    rel_fields: list[tuple[int, int, np.ndarray]],
    labels: LabelMap,
    clamp: float = 1e-7,
):
    """Masked binary CE on the target-class probability inside each prior region.

    rel_fields holds (anchor_id, target_id, prior_field) triples; the region
    of relation r is {v : field_r(v) > 0}.  Relations with an empty region
    are skipped (the divisor shrinks accordingly); all skipped -> loss 0.
    """
    grad = np.zeros_like(probs)
    active = []
    for anchor_id, target_id, field in rel_fields:
        region = field > 0.0
        n = int(region.sum())
        if n == 0:
            continue
        active.append((target_id, region, n))
    if not active:
        return 0.0, grad
    r_count = len(active)
    total = 0.0
    for target_id, region, n in active:
        p = probs[target_id][region]
        g = (labels.data[region] == target_id).astype(np.float64)
        p_pos = np.maximum(p, clamp)
        p_neg = np.maximum(1.0 - p, clamp)
        total += float(-(g * np.log(p_pos) + (1.0 - g) * np.log(p_neg)).sum() / n)
        live_pos = (p > clamp).astype(np.float64)
        live_neg = (1.0 - p > clamp).astype(np.float64)
        gv = (-(g * live_pos / p_pos) + (1.0 - g) * live_neg / p_neg) / (n * r_count)
        grad[target_id][region] += gv
    return total / r_count, grad


def relation_loss(
    fused: LogitTensor,
    rel_fields: list[tuple[int, int, np.ndarray]],
    labels: LabelMap,
    clamp: float = 1e-7,
) -> float:
    probs = softmax_channels(fused)
    return relation_bce_from_probs(probs.data, rel_fields, labels, clamp)[0]


# --- Composition --------------------------------------------------------

def total_fusion_loss(
    seg: float,
    text: float,
    rel: float,
    cfg: LossConfig,
    *,
    dice: float = 0.0,
    ce: float = 0.0,
    focal: float = 0.0,
) -> LossBreakdown:
    total = seg + cfg.lambda_text * text + cfg.lambda_rel * rel
    return LossBreakdown(
        dice=dice, ce=ce, focal=focal, seg=seg, text=text, rel=rel, total=total
    )
