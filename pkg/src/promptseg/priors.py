"""Exact anisotropic Euclidean distance transforms and relation spatial priors.

The squared EDT is the separable lower-envelope (parabola) algorithm run once
per axis, weighted by physical spacing.  For spacings that are exact binary
fractions (1.0, 1.5, 2.0, ...) the results equal the brute-force
minimum-over-seeds computation bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import EmptyMask
from .grids import LogitTensor

PriorTensor = LogitTensor  # channels hold per-class prior fields, values in [0, 1]


@dataclass
class BinaryMask:
    """Boolean voxel set, e.g. an anchor organ region."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.data.shape

    def is_empty(self) -> bool:
        return not bool(self.data.any())


@dataclass
class DistanceField:
    """Per-voxel distance to the nearest seed, in mm (or squared mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    squared: bool = True


@dataclass
class RelationPriorConfig:
    """d_max is in voxel units and converted to mm via the mean spacing.

    dilate_radius_mm optionally grows the anchor before measuring distances
    (off by default; distances are measured from the raw anchor region).
    """

    d_max: float = 8.0
    dilate_radius_mm: float = 0.0

    def __post_init__(self):
        if self.d_max <= 0:
            raise EmptyMask(f"d_max must be positive, got {self.d_max}")


@njit(cache=True)
def _edt_lines_inplace(f, w):  # pragma: no cover - exercised via squared_edt
    """One lower-envelope pass over every row of f (n columns, spacing w)."""
    m, n = f.shape
    v = np.empty(n, np.int64)
    z = np.empty(n + 1, np.float64)
    out = np.empty(n, np.float64)
    for r in range(m):
        row = f[r]
        k = -1
        s = 0.0
        for q in range(n):
            fq = row[q]
            if fq == np.inf:
                continue
            xq = w * q
            while k >= 0:
                p = v[k]
                xp = w * p
                s = ((fq + xq * xq) - (row[p] + xp * xp)) / (2.0 * (xq - xp))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
            else:
                k += 1
                v[k] = q
                z[k] = s
            z[k + 1] = np.inf
        if k < 0:
            continue  # no seed reaches this line yet; stays +inf
        j = 0
        for q in range(n):
            x = w * q
            while z[j + 1] < x:
                j += 1
            p = v[j]
            d = x - w * p
            out[q] = d * d + row[p]
        for q in range(n):
            row[q] = out[q]


def _edt_pass(field: np.ndarray, axis: int, spacing: float) -> np.ndarray:
    moved = np.moveaxis(field, axis, -1)
    shape = moved.shape
    lines = np.ascontiguousarray(moved).reshape(-1, shape[-1])
    _edt_lines_inplace(lines, float(spacing))
    return np.moveaxis(lines.reshape(shape), -1, axis)


def squared_edt(mask: BinaryMask) -> DistanceField:
    """Exact squared Euclidean distance (mm^2) to the nearest set voxel."""
    if mask.is_empty():
        raise EmptyMask("squared_edt requires at least one set voxel")
    field = np.where(mask.data, 0.0, np.inf)
    for axis in range(3):
        field = _edt_pass(field, axis, mask.spacing[axis])
    return DistanceField(field, mask.spacing, squared=True)


def edt(mask: BinaryMask) -> DistanceField:
    sq = squared_edt(mask)
    return DistanceField(np.sqrt(sq.data), mask.spacing, squared=False)


def dilate(mask: BinaryMask, radius_mm: float) -> BinaryMask:
    """Spherical dilation: all voxels within radius_mm of the input set."""
    if radius_mm < 0:
        raise EmptyMask(f"dilation radius must be >= 0, got {radius_mm}")
    if mask.is_empty():
        raise EmptyMask("dilate requires a nonempty mask")
    if radius_mm == 0:
        return BinaryMask(mask.data.copy(), mask.spacing)
    sq = squared_edt(mask).data
    return BinaryMask(sq <= radius_mm * radius_mm, mask.spacing)


def relation_prior(anchor: BinaryMask, cfg: RelationPriorConfig) -> np.ndarray:
    """Linear-decay field: 1 on the anchor, 0 beyond d_max + 1 (mm units)."""
    if anchor.is_empty():
        raise EmptyMask("relation prior requires a nonempty anchor region")
    region = anchor
    if cfg.dilate_radius_mm > 0:
        region = dilate(anchor, cfg.dilate_radius_mm)
    d = np.sqrt(squared_edt(region).data)
    d_max_mm = cfg.d_max * (sum(anchor.spacing) / 3.0)
    return np.maximum(0.0, 1.0 - d / (d_max_mm + 1.0))


def relation_prior_fields(
    relations: list[tuple[int, int]],
    anchor_masks: dict[int, BinaryMask],
    cfg: RelationPriorConfig,
) -> tuple[list[tuple[int, int, np.ndarray]], list[tuple[int, int]]]:
    """Per-relation prior fields, skipping relations whose anchor is absent.

    Returns ([(anchor_id, target_id, field), ...], skipped_relations).
    """
    fields = []
    skipped = []
    for anchor_id, target_id in relations:
        mask = anchor_masks.get(anchor_id)
        if mask is None or mask.is_empty():
            skipped.append((anchor_id, target_id))
            continue
        fields.append((anchor_id, target_id, relation_prior(mask, cfg)))
    return fields, skipped


def assemble_prior_tensor(
    relations: list[tuple[int, int]],
    anchor_masks: dict[int, BinaryMask],
    num_classes: int,
    cfg: RelationPriorConfig,
) -> tuple[PriorTensor, list[tuple[int, int]]]:
    """Combine relation priors into a (C, D, H, W) tensor.

    Each target channel takes the elementwise max over all its relations'
    fields; every other channel stays zero.  Relations with an absent anchor
    are skipped and reported, never raised.
    """
    fields, skipped = relation_prior_fields(relations, anchor_masks, cfg)
    if anchor_masks:
        some = next(iter(anchor_masks.values()))
        dims, spacing = some.dims, some.spacing
    elif fields:
        dims, spacing = fields[0][2].shape, (1.0, 1.0, 1.0)
    else:
        dims, spacing = (1, 1, 1), (1.0, 1.0, 1.0)
    out = np.zeros((num_classes,) + tuple(dims), dtype=np.float64)
    for _, target_id, field in fields:
        np.maximum(out[target_id], field, out=out[target_id])
    return PriorTensor(out, spacing), skipped
