"""Synthetic phantom volumes, the corruptible visual-logit oracle, patch
sampling, augmentation, and intensity normalization.

Phantoms are ellipsoidal "organs" placed in physical coordinates with known
ground truth.  The logit oracle stands in for the frozen visual backbone and
can deliberately suppress chosen classes so that only text conditioning can
recover them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, EmptyForeground, LabelOutOfRange, NoForeground
from .grids import DEFAULT_NUM_CLASSES, LabelMap, LogitTensor, Volume, one_hot

HU_WINDOW = (-175.0, 250.0)


@dataclass
class OrganSpec:
    class_id: int
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]
    intensity_mean: float
    intensity_sigma: float


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    organs: list[OrganSpec] = field(default_factory=list)
    background_mean: float = -60.0
    background_sigma: float = 15.0
    seed: int = 0

    def __post_init__(self):
        ids = [o.class_id for o in self.organs]
        if len(set(ids)) != len(ids):
            raise ConfigInvalid("duplicate organ class ids in phantom spec")
        for organ in self.organs:
            if not 1 <= organ.class_id <= 13:
                raise ConfigInvalid(f"organ class {organ.class_id} outside 1..13")
            if min(organ.radii_mm) <= 0:
                raise ConfigInvalid("organ radii must be positive")


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    """Voxel label = first ellipsoid containing it (list order = priority)."""
    dims = tuple(int(d) for d in spec.dims)
    sz, sy, sx = spec.spacing
    zs = np.arange(dims[0])[:, None, None] * sz
    ys = np.arange(dims[1])[None, :, None] * sy
    xs = np.arange(dims[2])[None, None, :] * sx

    labels = np.zeros(dims, dtype=np.uint8)
    mean_map = np.full(dims, spec.background_mean)
    sigma_map = np.full(dims, spec.background_sigma)
    unclaimed = np.ones(dims, dtype=bool)
    for organ in spec.organs:
        cz, cy, cx = organ.center_mm
        rz, ry, rx = organ.radii_mm
        inside = (
            ((zs - cz) / rz) ** 2 + ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2
        ) <= 1.0
        claim = inside & unclaimed
        labels[claim] = organ.class_id
        mean_map[claim] = organ.intensity_mean
        sigma_map[claim] = organ.intensity_sigma
        unclaimed &= ~claim

    rng = np.random.default_rng(spec.seed)
    intensities = mean_map + sigma_map * rng.standard_normal(dims)
    return Volume(intensities, spec.spacing), LabelMap(labels, spec.spacing)


@dataclass
class LogitOracleConfig:
    scale: float = 4.0
    noise_sigma: float = 0.5
    suppressed_classes: frozenset[int] = frozenset()
    suppression_margin: float = 2.0
    confusion_pairs: tuple[tuple[int, int, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigInvalid("oracle scale must be positive")
        self.suppressed_classes = frozenset(int(c) for c in self.suppressed_classes)
        for a, b, prob in self.confusion_pairs:
            if not 0.0 <= prob <= 1.0:
                raise ConfigInvalid(f"confusion probability {prob} outside [0,1]")


def oracle_logits(
    labels: LabelMap,
    cfg: LogitOracleConfig,
    num_classes: int = DEFAULT_NUM_CLASSES,
    rng: np.random.Generator | None = None,
) -> LogitTensor:
    """Frozen-backbone stand-in: scaled one-hot logits plus corruption.

    Confusion pairs (a, b, prob) redirect the one-hot target from a to b per
    voxel.  At the foreground voxels of a suppressed class the one-hot base
    is replaced: the background channel gets +scale and the organ's own
    channel scale - suppression_margin, so the visual argmax loses the organ
    by exactly the margin and a text bias exceeding the margin wins it back.
    Gaussian noise is added last, to every channel.
    """
    g = labels.data
    if g.size and int(g.max()) >= num_classes:
        raise LabelOutOfRange(f"label {int(g.max())} >= C={num_classes}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    targets = g.copy()
    for a, b, prob in cfg.confusion_pairs:
        at_a = g == a
        if prob > 0 and at_a.any():
            swap = at_a & (rng.random(g.shape) < prob)
            targets[swap] = b

    base = cfg.scale * one_hot(LabelMap(targets, labels.spacing), num_classes).data
    for k in cfg.suppressed_classes:
        at_k = g == k
        if not at_k.any():
            continue
        base[:, at_k] = 0.0
        base[k, at_k] = cfg.scale - cfg.suppression_margin
        base[0, at_k] = cfg.scale

    if cfg.noise_sigma > 0:
        base = base + cfg.noise_sigma * rng.standard_normal(base.shape)
    return LogitTensor(base, labels.spacing)


@dataclass
class PatchSamplerConfig:
    patch_dims: tuple[int, int, int] = (96, 96, 96)
    pos_fraction: float = 0.5
    samples_per_volume: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise ConfigInvalid("pos_fraction must be in [0,1]")
        if self.samples_per_volume < 1:
            raise ConfigInvalid("samples_per_volume must be >= 1")


def _pad_to(data: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    pad = [(0, max(0, p - d)) for d, p in zip(data.shape, dims)]
    if any(hi for _, hi in pad):
        return np.pad(data, pad)
    return data


def sample_patches(
    volume: Volume,
    labels: LabelMap,
    cfg: PatchSamplerConfig,
    rng: np.random.Generator | None = None,
) -> list[tuple[Volume, LabelMap, tuple[int, int, int]]]:
    """Pos/neg balanced patch sampling; offsets are in padded-grid voxels."""
    if volume.dims != labels.dims:
        raise ConfigInvalid(f"volume {volume.dims} vs labels {labels.dims}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    patch = tuple(int(p) for p in cfg.patch_dims)
    vdata = _pad_to(volume.data, patch)
    ldata = _pad_to(labels.data, patch)
    dims = vdata.shape
    max_off = tuple(d - p for d, p in zip(dims, patch))
    fg = np.argwhere(ldata > 0)

    out = []
    for _ in range(cfg.samples_per_volume):
        positive = rng.random() < cfg.pos_fraction
        if positive:
            if fg.size == 0:
                raise NoForeground("positive patch requested but labels are empty")
            center = fg[int(rng.integers(len(fg)))]
            off = tuple(
                int(np.clip(center[a] - patch[a] // 2, 0, max_off[a])) for a in range(3)
            )
        else:
            off = tuple(int(rng.integers(0, max_off[a] + 1)) for a in range(3))
        sl = tuple(slice(off[a], off[a] + patch[a]) for a in range(3))
        out.append(
            (
                Volume(vdata[sl].copy(), volume.spacing),
                LabelMap(ldata[sl].copy(), labels.spacing),
                off,
            )
        )
    return out


def augment(
    volume: Volume,
    labels: LabelMap,
    seed: int,
    max_intensity_shift: float = 0.1,
    flips: bool = True,
    rotations: bool = True,
) -> tuple[Volume, LabelMap]:
    """Random flips / 90-degree rotations (both grids) + intensity shift (volume only).

    Rotations are skipped for axis pairs of unequal extent so dims never change.
    """
    if max_intensity_shift > 0.1:
        raise ConfigInvalid("intensity shift fraction must be <= 0.1")
    rng = np.random.default_rng(seed)
    v = volume.data.copy()
    l = labels.data.copy()
    if flips:
        for axis in range(3):
            if rng.random() < 0.5:
                v = np.flip(v, axis)
                l = np.flip(l, axis)
    if rotations:
        pairs = ((0, 1), (0, 2), (1, 2))
        pair = pairs[int(rng.integers(3))]
        k = int(rng.integers(4))
        if v.shape[pair[0]] == v.shape[pair[1]]:
            v = np.rot90(v, k, axes=pair)
            l = np.rot90(l, k, axes=pair)
    if max_intensity_shift > 0:
        delta = rng.uniform(-max_intensity_shift, max_intensity_shift)
        v = v * (1.0 + delta)
    return Volume(np.ascontiguousarray(v), volume.spacing), LabelMap(
        np.ascontiguousarray(l), labels.spacing
    )


def normalize_intensity(volume: Volume) -> Volume:
    """Clip to the HU window [-175, 250] and rescale linearly to [0, 1]."""
    lo, hi = HU_WINDOW
    data = (np.clip(volume.data, lo, hi) - lo) / (hi - lo)
    return Volume(data, volume.spacing)


# --- phantom spec files ----------------------------------------------------

def save_phantom_spec(spec: PhantomSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dims={','.join(str(d) for d in spec.dims)}\n")
        fh.write(f"spacing={','.join(repr(float(s)) for s in spec.spacing)}\n")
        fh.write(f"background_mean={spec.background_mean!r}\n")
        fh.write(f"background_sigma={spec.background_sigma!r}\n")
        fh.write(f"seed={spec.seed}\n")
        for o in spec.organs:
            ctr = ",".join(repr(float(v)) for v in o.center_mm)
            rad = ",".join(repr(float(v)) for v in o.radii_mm)
            fh.write(
                f"organ={o.class_id}|{ctr}|{rad}|{o.intensity_mean!r}|{o.intensity_sigma!r}\n"
            )


def load_phantom_spec(path: str) -> PhantomSpec:
    kv = {}
    organs = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, value = line.split("=", 1)
            if key == "organ":
                cid, ctr, rad, mean, sigma = value.split("|")
                organs.append(
                    OrganSpec(
                        int(cid),
                        tuple(float(v) for v in ctr.split(",")),
                        tuple(float(v) for v in rad.split(",")),
                        float(mean),
                        float(sigma),
                    )
                )
            else:
                kv[key] = value
    return PhantomSpec(
        dims=tuple(int(v) for v in kv["dims"].split(",")),
        spacing=tuple(float(v) for v in kv["spacing"].split(",")),
        organs=organs,
        background_mean=float(kv["background_mean"]),
        background_sigma=float(kv["background_sigma"]),
        seed=int(kv["seed"]),
    )


def random_phantom_spec(
    seed: int,
    dims: tuple[int, int, int] = (48, 48, 48),
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    organ_ids: tuple[int, ...] = (1, 2, 3, 6, 7),
    radius_range: tuple[float, float] = (4.0, 8.0),
) -> PhantomSpec:
    """Desk-scale phantom: every listed organ is guaranteed at least one voxel."""
    rng = np.random.default_rng(seed)
    extent = tuple(d * s for d, s in zip(dims, spacing))
    # radii must leave room for the 1 mm center margin on every axis
    fit = max(1.0, min(extent) / 2.0 - 1.5)
    lo, hi = min(radius_range[0], fit), min(radius_range[1], fit)
    for _ in range(100):
        organs = []
        for cid in organ_ids:
            radii = tuple(rng.uniform(lo, hi) for _ in range(3))
            center = tuple(
                rng.uniform(r + 1.0, e - r - 1.0) for r, e in zip(radii, extent)
            )
            organs.append(OrganSpec(cid, center, radii, 10.0 + 15.0 * cid, 8.0))
        spec = PhantomSpec(dims, spacing, organs, seed=seed)
        _, labels = generate_phantom(spec)
        if set(organ_ids) <= labels.classes_present():
            return spec
    raise EmptyForeground("could not place all organs; loosen the spec")
