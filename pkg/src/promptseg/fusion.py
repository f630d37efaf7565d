"""Text-to-class bias head, logit fusion, analytic gradients, checkpoints.

The bias head is a two-layer MLP mapping a frozen 768-dim prompt embedding
to one additive scalar per class; two learned scalars scale the bias and the
spatial prior when they are added onto the visual logits.  Only these
parameters ever receive gradients: embeddings, visual logits, and priors are
data.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import BadChecksum, NonFiniteLoss, ShapeMismatch
from .grids import LabelMap, LogitTensor, one_hot, softmax_channels
from .losses import (
    LossBreakdown,
    LossConfig,
    cross_entropy_grad,
    dice_loss_grad,
    relation_bce_from_probs,
    softmax_backward,
    text_alignment_grad,
    total_fusion_loss,
)
from .optim import AdamWState
from .volio import read_header, write_header

EMBED_DIM = 768
HIDDEN_DIM = 256

_TENSOR_ORDER = ("w1", "b1", "w2", "b2", "alpha", "beta")


@dataclass
class FusionParams:
    w1: np.ndarray          # (E, H)
    b1: np.ndarray          # (H,)
    w2: np.ndarray          # (H, C)
    b2: np.ndarray          # (C,)
    alpha: float
    beta: float

    @property
    def embed_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def channels(self) -> int:
        return self.w2.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "alpha": np.asarray(float(self.alpha)),
            "beta": np.asarray(float(self.beta)),
        }

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "FusionParams":
        return cls(
            w1=d["w1"], b1=d["b1"], w2=d["w2"], b2=d["b2"],
            alpha=float(d["alpha"]), beta=float(d["beta"]),
        )

    def copy(self) -> "FusionParams":
        return FusionParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            float(self.alpha), float(self.beta),
        )


@dataclass
class FusionGradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    alpha: float
    beta: float

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "alpha": np.asarray(float(self.alpha)),
            "beta": np.asarray(float(self.beta)),
        }


@dataclass
class FusionTargets:
    """Supervision for one training patch."""

    labels: LabelMap
    presence: np.ndarray
    rel_fields: list[tuple[int, int, np.ndarray]]


def init_fusion(
    num_classes: int,
    seed: int,
    embed_dim: int = EMBED_DIM,
    hidden_dim: int = HIDDEN_DIM,
) -> FusionParams:
    """Glorot-uniform weights, zero biases, alpha = beta = 0.1."""
    if num_classes < 2:
        raise ShapeMismatch(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (embed_dim + hidden_dim))
    lim2 = np.sqrt(6.0 / (hidden_dim + num_classes))
    return FusionParams(
        w1=rng.uniform(-lim1, lim1, size=(embed_dim, hidden_dim)),
        b1=np.zeros(hidden_dim),
        w2=rng.uniform(-lim2, lim2, size=(hidden_dim, num_classes)),
        b2=np.zeros(num_classes),
        alpha=0.1,
        beta=0.1,
    )


def class_bias(params: FusionParams, embedding: np.ndarray) -> np.ndarray:
    """b = ReLU(t W1 + b1) W2 + b2."""
    t = np.asarray(embedding, dtype=np.float64)
    if t.shape != (params.embed_dim,):
        raise ShapeMismatch(f"embedding shape {t.shape}, expected ({params.embed_dim},)")
    hidden = np.maximum(0.0, t @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2


def fuse_logits(
    visual: LogitTensor,
    bias: np.ndarray,
    alpha: float,
    beta: float,
    prior: LogitTensor | None = None,
) -> LogitTensor:
    """L_fused = L_vis + alpha * bias (broadcast) + beta * prior."""
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (visual.channels,):
        raise ShapeMismatch(f"bias length {bias.shape} vs {visual.channels} channels")
    fused = visual.data + alpha * bias[:, None, None, None]
    if prior is not None:
        if prior.data.shape != visual.data.shape:
            raise ShapeMismatch(
                f"prior shape {prior.data.shape} vs logits {visual.data.shape}"
            )
        fused = fused + beta * prior.data
    return LogitTensor(fused, visual.spacing)


def fusion_backward(
    embedding: np.ndarray,
    visual: LogitTensor,
    prior: LogitTensor | None,
    targets: FusionTargets,
    cfg: LossConfig,
    params: FusionParams,
) -> tuple[LossBreakdown, FusionGradients]:
    """Full-objective forward plus analytic gradients for the fusion parameters.

    The loss is dice + cross-entropy on the fused softmax, plus the weighted
    text-alignment and relation terms.  Gradients stop at the fusion
    parameters: visual logits, embeddings, and priors receive none.
    """
    t = np.asarray(embedding, dtype=np.float64)
    c = visual.channels
    if targets.labels.dims != visual.dims:
        raise ShapeMismatch(f"labels {targets.labels.dims} vs logits {visual.dims}")
    presence = np.asarray(targets.presence, dtype=np.float64)
    if presence.shape != (c,):
        raise ShapeMismatch(f"presence length {presence.shape} vs {c} channels")

    hidden_pre = t @ params.w1 + params.b1
    hidden = np.maximum(0.0, hidden_pre)
    bias = hidden @ params.w2 + params.b2
    fused = fuse_logits(visual, bias, params.alpha, params.beta, prior)

    probs = softmax_channels(fused)
    onehot = one_hot(targets.labels, c)
    dice_val, d_dice = dice_loss_grad(probs, onehot, cfg.epsilon)
    ce_val, d_ce = cross_entropy_grad(probs, onehot, cfg.prob_clamp)
    rel_val, d_rel = relation_bce_from_probs(
        probs.data, targets.rel_fields, targets.labels, cfg.prob_clamp
    )
    text_val, d_text_bias = text_alignment_grad(bias, presence, cfg.prob_clamp)

    breakdown = total_fusion_loss(
        dice_val + ce_val, text_val, rel_val, cfg, dice=dice_val, ce=ce_val
    )
    if not np.isfinite(breakdown.total):
        raise NonFiniteLoss(f"loss diverged: {breakdown}")

    d_probs = d_dice + d_ce + cfg.lambda_rel * d_rel
    d_logits = softmax_backward(probs.data, d_probs)

    per_class = d_logits.sum(axis=(1, 2, 3))
    d_alpha = float(per_class @ bias)
    d_beta = float((d_logits * prior.data).sum()) if prior is not None else 0.0
    d_bias = params.alpha * per_class + cfg.lambda_text * d_text_bias

    d_w2 = np.outer(hidden, d_bias)
    d_b2 = d_bias.copy()
    d_hidden = params.w2 @ d_bias
    d_hidden_pre = d_hidden * (hidden_pre > 0.0)
    d_w1 = np.outer(t, d_hidden_pre)
    d_b1 = d_hidden_pre.copy()

    grads = FusionGradients(d_w1, d_b1, d_w2, d_b2, d_alpha, d_beta)
    return breakdown, grads


# --- checkpoint I/O ------------------------------------------------------

@dataclass
class FusionCheckpoint:
    params: FusionParams
    epoch: int
    opt_state: AdamWState
    config_hash: str


def fusion_config_hash(embed_dim: int, hidden_dim: int, channels: int) -> str:
    return f"{zlib.crc32(f'E={embed_dim},H={hidden_dim},C={channels}'.encode()):08x}"


def _flatten_tensors(params: FusionParams, state: AdamWState) -> np.ndarray:
    pdict = params.as_dict()
    chunks = [pdict[k].ravel() for k in _TENSOR_ORDER]
    for buf in (state.m, state.v):
        for k in _TENSOR_ORDER:
            arr = buf.get(k)
            chunks.append(np.zeros(pdict[k].size) if arr is None else np.asarray(arr).ravel())
    return np.concatenate([np.asarray(c, dtype="<f8") for c in chunks])


def save_checkpoint(ckpt: FusionCheckpoint, path: str) -> None:
    p = ckpt.params
    payload = _flatten_tensors(p, ckpt.opt_state).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)
    write_header(
        path + ".hdr",
        {
            "kind": "fusion",
            "embed_dim": p.embed_dim,
            "hidden_dim": p.hidden_dim,
            "channels": p.channels,
            "epoch": ckpt.epoch,
            "step": ckpt.opt_state.step,
            "beta1": repr(ckpt.opt_state.beta1),
            "beta2": repr(ckpt.opt_state.beta2),
            "eps": repr(ckpt.opt_state.eps),
            "config_hash": ckpt.config_hash,
            "crc32": f"{zlib.crc32(payload):08x}",
        },
    )


def load_checkpoint(path: str, expect_channels: int | None = None) -> FusionCheckpoint:
    hdr = read_header(path + ".hdr")
    embed_dim = int(hdr["embed_dim"])
    hidden_dim = int(hdr["hidden_dim"])
    channels = int(hdr["channels"])
    if expect_channels is not None and channels != expect_channels:
        raise ShapeMismatch(
            f"checkpoint has C={channels}, run expects C={expect_channels}"
        )
    if hdr.get("config_hash") != fusion_config_hash(embed_dim, hidden_dim, channels):
        raise BadChecksum(f"config hash mismatch in {path}.hdr")
    with open(path, "rb") as fh:
        raw = fh.read()
    if zlib.crc32(raw) != int(hdr["crc32"], 16):
        raise BadChecksum(f"payload checksum mismatch for {path}")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    shapes = {
        "w1": (embed_dim, hidden_dim),
        "b1": (hidden_dim,),
        "w2": (hidden_dim, channels),
        "b2": (channels,),
        "alpha": (),
        "beta": (),
    }
    total = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != 3 * total:
        raise BadChecksum(f"{path}: payload size {flat.size} != expected {3 * total}")

    def take(offset):
        out = {}
        for k in _TENSOR_ORDER:
            n = int(np.prod(shapes[k]))
            out[k] = flat[offset : offset + n].reshape(shapes[k]).copy()
            offset += n
        return out, offset

    pvals, off = take(0)
    mvals, off = take(off)
    vvals, _ = take(off)
    params = FusionParams.from_dict(pvals)
    state = AdamWState(
        m=mvals,
        v=vvals,
        step=int(hdr["step"]),
        beta1=float(hdr.get("beta1", 0.9)),
        beta2=float(hdr.get("beta2", 0.999)),
        eps=float(hdr.get("eps", 1e-8)),
    )
    return FusionCheckpoint(params, int(hdr["epoch"]), state, hdr["config_hash"])


def checkpoint_file_hash(path: str) -> str:
    """crc32 of the checkpoint payload, for reporting which model served a result."""
    if not os.path.exists(path):
        return ""
    with open(path, "rb") as fh:
        return f"{zlib.crc32(fh.read()):08x}"
