"""Residual refinement head: conv3x3x3 -> instance norm -> ReLU -> dropout
-> conv1x1x1, added back onto the input logits.

Forward caches every intermediate needed for the exact analytic backward
pass (including the instance-norm mean/variance terms).  Zeroing the final
projection makes the whole head an exact identity on logits.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadChecksum, DegenerateField, ShapeMismatch, StaleCache
from .grids import LabelMap, LogitTensor, one_hot, softmax_channels
from .losses import LossConfig, dice_loss_grad, focal_loss_grad, softmax_backward
from .optim import AdamWState, ScheduleConfig, adamw_step, cosine_lr
from .volio import read_header, write_header

_TENSOR_ORDER = ("conv3_w", "conv3_b", "in_scale", "in_shift", "conv1_w", "conv1_b")


@dataclass
class RefineParams:
    conv3_w: np.ndarray      # (C_out, C_in, 3, 3, 3)
    conv3_b: np.ndarray      # (C,)
    in_scale: np.ndarray     # (C,)
    in_shift: np.ndarray     # (C,)
    conv1_w: np.ndarray      # (C_out, C_in)
    conv1_b: np.ndarray      # (C,)
    dropout_rate: float = 0.1
    in_eps: float = 1e-5

    @property
    def channels(self) -> int:
        return self.conv3_w.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in _TENSOR_ORDER}

    def copy(self) -> "RefineParams":
        return RefineParams(
            *(getattr(self, k).copy() for k in _TENSOR_ORDER),
            dropout_rate=self.dropout_rate,
            in_eps=self.in_eps,
        )


def init_refine(num_classes: int, seed: int, dropout_rate: float = 0.1) -> RefineParams:
    """Random 3x3x3 kernel, zeroed projection: the head starts as an identity."""
    rng = np.random.default_rng(seed)
    fan = num_classes * 27
    lim = np.sqrt(6.0 / (fan + fan))
    return RefineParams(
        conv3_w=rng.uniform(-lim, lim, size=(num_classes, num_classes, 3, 3, 3)),
        conv3_b=np.zeros(num_classes),
        in_scale=np.ones(num_classes),
        in_shift=np.zeros(num_classes),
        conv1_w=np.zeros((num_classes, num_classes)),
        conv1_b=np.zeros(num_classes),
        dropout_rate=dropout_rate,
    )


def instance_norm(
    x: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Per-channel normalization over all voxels, biased variance, affine."""
    if x[0].size < 2:
        raise DegenerateField("instance norm needs at least 2 voxels per channel")
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    var = x.var(axis=(1, 2, 3), keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return xhat * scale[:, None, None, None] + shift[:, None, None, None]


@dataclass
class RefineCache:
    x_padded: np.ndarray
    h_conv: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    relu_mask: np.ndarray
    drop_mask: np.ndarray | None
    h_final: np.ndarray
    params: RefineParams
    train_mode: bool = True


def _conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    windows = sliding_window_view(pad, (3, 3, 3), axis=(1, 2, 3))
    out = np.einsum("izyxabc,oiabc->ozyx", windows, w, optimize=True)
    return out + b[:, None, None, None], pad


def refine_forward(
    logits: LogitTensor,
    params: RefineParams,
    mode: str = "eval",
    seed: int = 0,
) -> tuple[LogitTensor, RefineCache]:
    """S_tilde = S + conv1(dropout(relu(instancenorm(conv3(S)))))."""
    if logits.channels != params.channels:
        raise ShapeMismatch(
            f"logits have C={logits.channels}, head expects C={params.channels}"
        )
    if mode not in ("train", "eval"):
        raise ShapeMismatch(f"mode must be train or eval, got {mode!r}")
    x = logits.data
    h_conv, x_padded = _conv3(x, params.conv3_w, params.conv3_b)

    if h_conv[0].size < 2:
        raise DegenerateField("refinement head needs more than one voxel")
    mean = h_conv.mean(axis=(1, 2, 3), keepdims=True)
    var = h_conv.var(axis=(1, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + params.in_eps)
    xhat = (h_conv - mean) * inv_std
    h_norm = xhat * params.in_scale[:, None, None, None] + params.in_shift[:, None, None, None]

    relu_mask = h_norm > 0.0
    h_relu = np.where(relu_mask, h_norm, 0.0)

    drop_mask = None
    h_drop = h_relu
    if mode == "train" and params.dropout_rate > 0.0:
        rng = np.random.default_rng(seed)
        keep = 1.0 - params.dropout_rate
        drop_mask = (rng.random(h_relu.shape) < keep).astype(np.float64) / keep
        h_drop = h_relu * drop_mask

    residual = np.einsum("oi,izyx->ozyx", params.conv1_w, h_drop) + params.conv1_b[
        :, None, None, None
    ]
    out = LogitTensor(x + residual, logits.spacing)
    cache = RefineCache(
        x_padded=x_padded,
        h_conv=h_conv,
        xhat=xhat,
        inv_std=inv_std,
        relu_mask=relu_mask,
        drop_mask=drop_mask,
        h_final=h_drop,
        params=params,
        train_mode=(mode == "train"),
    )
    return out, cache


@dataclass
class RefineGradients:
    conv3_w: np.ndarray
    conv3_b: np.ndarray
    in_scale: np.ndarray
    in_shift: np.ndarray
    conv1_w: np.ndarray
    conv1_b: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in _TENSOR_ORDER}


def refine_backward(
    cache: RefineCache, d_out: np.ndarray
) -> tuple[RefineGradients, np.ndarray]:
    """Exact gradients for all head parameters plus dL/d(input logits)."""
    if not cache.train_mode:
        raise StaleCache("backward requires a cache from a train-mode forward")
    p = cache.params
    c = p.channels
    if d_out.shape != cache.h_final.shape:
        raise ShapeMismatch(f"upstream gradient shape {d_out.shape} unexpected")

    # residual add: gradient flows to both the input and the head output
    d_res = d_out
    d_conv1_b = d_res.sum(axis=(1, 2, 3))
    d_conv1_w = np.einsum("ozyx,izyx->oi", d_res, cache.h_final, optimize=True)
    d_drop = np.einsum("oi,ozyx->izyx", p.conv1_w, d_res, optimize=True)

    d_relu = d_drop if cache.drop_mask is None else d_drop * cache.drop_mask
    d_norm = np.where(cache.relu_mask, d_relu, 0.0)

    d_in_scale = (d_norm * cache.xhat).sum(axis=(1, 2, 3))
    d_in_shift = d_norm.sum(axis=(1, 2, 3))
    d_xhat = d_norm * p.in_scale[:, None, None, None]
    n = cache.h_conv[0].size
    mean_dxhat = d_xhat.mean(axis=(1, 2, 3), keepdims=True)
    mean_dxhat_xhat = (d_xhat * cache.xhat).mean(axis=(1, 2, 3), keepdims=True)
    d_hconv = cache.inv_std * (d_xhat - mean_dxhat - cache.xhat * mean_dxhat_xhat)

    d_conv3_b = d_hconv.sum(axis=(1, 2, 3))
    windows = sliding_window_view(cache.x_padded, (3, 3, 3), axis=(1, 2, 3))
    d_conv3_w = np.einsum("ozyx,izyxabc->oiabc", d_hconv, windows, optimize=True)

    dims = d_hconv.shape[1:]
    d_xpad = np.zeros((c,) + tuple(d + 2 for d in dims))
    for a in range(3):
        for b in range(3):
            for cc in range(3):
                d_xpad[:, a : a + dims[0], b : b + dims[1], cc : cc + dims[2]] += np.einsum(
                    "oi,ozyx->izyx", p.conv3_w[:, :, a, b, cc], d_hconv, optimize=True
                )
    d_input = d_out + d_xpad[:, 1:-1, 1:-1, 1:-1]

    grads = RefineGradients(
        d_conv3_w, d_conv3_b, d_in_scale, d_in_shift, d_conv1_w, d_conv1_b
    )
    return grads, d_input


@dataclass
class RefineTrainConfig:
    epochs: int = 15
    lr: float = 5e-4
    weight_decay: float = 1e-5
    cycles: int = 5
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)


def finetune_refinement(
    samples: list[tuple[LogitTensor, LabelMap]],
    cfg: RefineTrainConfig,
    params: RefineParams | None = None,
) -> tuple[RefineParams, list[float]]:
    """Head-only fine-tuning with the Dice-Focal loss on the refined softmax.

    Visits every (logits, labels) patch once per epoch; deterministic for a
    fixed seed.  Returns the trained parameters and the per-step loss history.
    """
    if not samples:
        raise ShapeMismatch("need at least one training sample")
    c = samples[0][0].channels
    if params is None:
        params = init_refine(c, cfg.seed)
    else:
        params = params.copy()
    schedule = ScheduleConfig(cfg.lr, cfg.epochs, cycles=cfg.cycles)
    state = AdamWState()
    pdict = params.as_dict()
    history = []
    step_seed = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, schedule)
        for logits, labels in samples:
            refined, cache = refine_forward(
                logits, params, mode="train", seed=int(step_seed.integers(2**63))
            )
            probs = softmax_channels(refined)
            onehot = one_hot(labels, c)
            dice_val, d_dice = dice_loss_grad(probs, onehot, cfg.loss.epsilon)
            focal_val, d_focal = focal_loss_grad(
                probs, onehot, cfg.loss.gamma, cfg.loss.prob_clamp
            )
            d_logits = softmax_backward(probs.data, d_dice + d_focal)
            grads, _ = refine_backward(cache, d_logits)
            adamw_step(pdict, grads.as_dict(), state, lr, cfg.weight_decay)
            history.append(dice_val + focal_val)
    return params, history


# --- checkpoint I/O ------------------------------------------------------

@dataclass
class RefineCheckpoint:
    params: RefineParams
    epoch: int
    opt_state: AdamWState
    config_hash: str


def refine_config_hash(channels: int) -> str:
    return f"{zlib.crc32(f'refine,C={channels}'.encode()):08x}"


def save_refine_checkpoint(ckpt: RefineCheckpoint, path: str) -> None:
    p = ckpt.params
    pdict = p.as_dict()
    chunks = [pdict[k].ravel() for k in _TENSOR_ORDER]
    for buf in (ckpt.opt_state.m, ckpt.opt_state.v):
        for k in _TENSOR_ORDER:
            arr = buf.get(k)
            chunks.append(np.zeros(pdict[k].size) if arr is None else np.asarray(arr).ravel())
    payload = np.concatenate(chunks).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)
    write_header(
        path + ".hdr",
        {
            "kind": "refine",
            "channels": p.channels,
            "dropout_rate": repr(p.dropout_rate),
            "in_eps": repr(p.in_eps),
            "epoch": ckpt.epoch,
            "step": ckpt.opt_state.step,
            "config_hash": ckpt.config_hash,
            "crc32": f"{zlib.crc32(payload):08x}",
        },
    )


def load_refine_checkpoint(path: str, expect_channels: int | None = None) -> RefineCheckpoint:
    hdr = read_header(path + ".hdr")
    c = int(hdr["channels"])
    if expect_channels is not None and c != expect_channels:
        raise ShapeMismatch(f"checkpoint has C={c}, run expects C={expect_channels}")
    if hdr.get("config_hash") != refine_config_hash(c):
        raise BadChecksum(f"config hash mismatch in {path}.hdr")
    with open(path, "rb") as fh:
        raw = fh.read()
    if zlib.crc32(raw) != int(hdr["crc32"], 16):
        raise BadChecksum(f"payload checksum mismatch for {path}")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    shapes = {
        "conv3_w": (c, c, 3, 3, 3),
        "conv3_b": (c,),
        "in_scale": (c,),
        "in_shift": (c,),
        "conv1_w": (c, c),
        "conv1_b": (c,),
    }
    total = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != 3 * total:
        raise BadChecksum(f"{path}: payload size {flat.size} != expected {3 * total}")

    def take(offset):
        out = {}
        for k in _TENSOR_ORDER:
            nk = int(np.prod(shapes[k]))
            out[k] = flat[offset : offset + nk].reshape(shapes[k]).copy()
            offset += nk
        return out, offset

    pvals, off = take(0)
    mvals, off = take(off)
    vvals, _ = take(off)
    params = RefineParams(
        **pvals,
        dropout_rate=float(hdr.get("dropout_rate", 0.1)),
        in_eps=float(hdr.get("in_eps", 1e-5)),
    )
    state = AdamWState(m=mvals, v=vvals, step=int(hdr["step"]))
    return RefineCheckpoint(params, int(hdr["epoch"]), state, hdr["config_hash"])
