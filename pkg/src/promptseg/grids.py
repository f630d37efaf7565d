"""Dense 3D/4D grid containers and the voxel-level kernels built on them.

Axis convention used everywhere in this package: grids are indexed
``(z, y, x)`` with shape ``(D, H, W)`` and x fastest in memory; channel
grids are ``(C, D, H, W)``.  Spacing is millimetres per voxel, ordered
``(sz, sy, sx)`` to match the axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    DimMismatch,
    EmptyInput,
    IndexOutOfRange,
    LabelOutOfRange,
    NonFiniteData,
    ShapeMismatch,
)

DEFAULT_NUM_CLASSES = 14

AXES = ("axial", "coronal", "sagittal")
_AXIS_TO_DIM = {"axial": 0, "coronal": 1, "sagittal": 2}


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise DimMismatch(f"spacing must be three positive values, got {spacing}")
    return spacing


@dataclass
class Volume:
    """Scalar 3D grid with physical voxel spacing.

    data: (D, H, W) float array, finite everywhere.
    spacing: (sz, sy, sx) in mm.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimMismatch(f"volume data must be 3D and nonempty, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteData("volume contains non-finite values")
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelMap:
    """Integer class-ID grid; 0 is background, 1..C-1 are organ classes."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimMismatch(f"label data must be 3D and nonempty, got shape {data.shape}")
        if data.dtype != np.uint8:
            if data.size and (data.min() < 0 or data.max() > 255):
                raise LabelOutOfRange("labels must fit in uint8")
            data = data.astype(np.uint8)
        self.data = data
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def classes_present(self) -> set[int]:
        return set(int(c) for c in np.unique(self.data))


@dataclass
class LogitTensor:
    """Per-class scalar grid of shape (C, D, H, W); holds logits or probabilities."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise DimMismatch(f"logit data must be (C,D,H,W), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteData("logit tensor contains non-finite values")
        self.spacing = _check_spacing(self.spacing)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass
class SliceImage:
    """A 2D plane extracted from a 3D grid.

    Orientation mapping (fixed): axial -> rows y, cols x; coronal -> rows z,
    cols x; sagittal -> rows z, cols y.
    """

    axis: str
    index: int
    pixels: np.ndarray = field(repr=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def softmax_channels(logits: LogitTensor) -> LogitTensor:
    """Per-voxel softmax over channels, computed with max-subtraction."""
    z = logits.data
    m = z.max(axis=0, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=0, keepdims=True)
    return LogitTensor(p, logits.spacing)


def argmax_channels(probs: LogitTensor) -> LabelMap:
    """Per-voxel index of the maximal channel; ties break to the lowest index."""
    # np.argmax returns the first maximal index, which is the declared tie-break.
    idx = np.argmax(probs.data, axis=0).astype(np.uint8)
    return LabelMap(idx, probs.spacing)


def one_hot(labels: LabelMap, num_classes: int) -> LogitTensor:
    """Expand a label map into a one-hot (C, D, H, W) tensor."""
    data = labels.data
    if data.size and int(data.max()) >= num_classes:
        raise LabelOutOfRange(
            f"label {int(data.max())} out of range for {num_classes} classes"
        )
    out = np.zeros((num_classes,) + data.shape, dtype=np.float64)
    d, h, w = np.indices(data.shape, sparse=True)
    out[data.astype(np.intp), d, h, w] = 1.0
    return LogitTensor(out, labels.spacing)


def window_starts(extent: int, patch: int, stride: int) -> list[int]:
    """Window start offsets along one axis: stride apart, last one clamped flush."""
    if extent <= patch:
        return [0]
    n = -(-(extent - patch) // stride) + 1  # ceil division
    return [min(i * stride, extent - patch) for i in range(n)]


def sliding_window_apply(
    grid: Volume | LabelMap,
    patch: tuple[int, int, int],
    overlap: float,
    fn: Callable[[Volume | LabelMap, tuple[int, int, int]], LogitTensor],
) -> LogitTensor:
    """Run ``fn`` over overlapping patches and average the per-voxel outputs.

    ``fn(patch_grid, offset)`` maps a patch of the input to a logit patch of
    the same spatial dims; ``offset`` is the patch origin in the padded grid
    (callers may use it to seed per-window randomness).  Inputs smaller than
    the patch are zero-padded and the result cropped back, so output dims
    always equal input dims.  Overlapping outputs are averaged with uniform
    weights, accumulated in window order for bit-reproducibility.
    """
    if not 0.0 <= overlap < 1.0:
        raise DimMismatch(f"overlap must be in [0,1), got {overlap}")
    data = grid.data
    if data.size == 0:
        raise EmptyInput("empty input grid")
    dims = data.shape
    patch = tuple(int(p) for p in patch)
    padded = tuple(max(d, p) for d, p in zip(dims, patch))
    if padded != dims:
        pad = [(0, pd - d) for pd, d in zip(padded, dims)]
        data = np.pad(data, pad, mode="constant")

    is_labels = isinstance(grid, LabelMap)
    acc = None
    cnt = np.zeros(padded, dtype=np.float64)
    starts = [
        window_starts(padded[a], patch[a], max(1, round(patch[a] * (1.0 - overlap))))
        for a in range(3)
    ]
    for z0 in starts[0]:
        for y0 in starts[1]:
            for x0 in starts[2]:
                sub = data[z0 : z0 + patch[0], y0 : y0 + patch[1], x0 : x0 + patch[2]]
                pg = LabelMap(sub, grid.spacing) if is_labels else Volume(sub, grid.spacing)
                out = fn(pg, (z0, y0, x0))
                if out.dims != patch:
                    raise ShapeMismatch(f"fn returned dims {out.dims}, expected {patch}")
                if acc is None:
                    acc = np.zeros((out.channels,) + padded, dtype=np.float64)
                acc[:, z0 : z0 + patch[0], y0 : y0 + patch[1], x0 : x0 + patch[2]] += out.data
                cnt[z0 : z0 + patch[0], y0 : y0 + patch[1], x0 : x0 + patch[2]] += 1.0
    acc /= cnt
    crop = acc[:, : dims[0], : dims[1], : dims[2]]
    return LogitTensor(crop, grid.spacing)


def extract_slice(
    grid: Volume | LabelMap | LogitTensor,
    axis: str,
    index: int,
    channel: int | None = None,
) -> SliceImage:
    """Pull one 2D plane out of a grid (a single channel for logit tensors)."""
    if axis not in _AXIS_TO_DIM:
        raise IndexOutOfRange(f"unknown axis {axis!r}; expected one of {AXES}")
    data = grid.data
    if isinstance(grid, LogitTensor):
        if channel is None or not 0 <= channel < grid.channels:
            raise IndexOutOfRange(f"channel {channel} out of range for C={grid.channels}")
        data = data[channel]
    dim = _AXIS_TO_DIM[axis]
    if not 0 <= index < data.shape[dim]:
        raise IndexOutOfRange(f"index {index} out of range for axis {axis} (extent {data.shape[dim]})")
    if dim == 0:
        plane = data[index, :, :]
    elif dim == 1:
        plane = data[:, index, :]
    else:
        plane = data[:, :, index]
    return SliceImage(axis=axis, index=index, pixels=plane.copy())
