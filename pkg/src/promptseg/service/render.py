"""PNG slice rendering and the fixed class palette (shared with the console)."""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from ..grids import LabelMap, SliceImage, Volume, extract_slice

# One color per organ class; background (0) renders fully transparent.
# The browser console ships the identical table; keep the two in sync.
PALETTE = {
    1: "#e6194b",
    2: "#3cb44b",
    3: "#ffe119",
    4: "#4363d8",
    5: "#f58231",
    6: "#911eb4",
    7: "#46f0f0",
    8: "#f032e6",
    9: "#bcf60c",
    10: "#fabebe",
    11: "#008080",
    12: "#e6beff",
    13: "#9a6324",
}


def palette_rgb(class_id: int) -> tuple[int, int, int]:
    hexcode = PALETTE[class_id].lstrip("#")
    return tuple(int(hexcode[i : i + 2], 16) for i in (0, 2, 4))


def _to_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def volume_slice_png(volume: Volume, axis: str, index: int) -> bytes:
    """Grayscale PNG of one plane, min/max normalized over the whole volume."""
    plane = extract_slice(volume, axis, index).pixels
    lo = float(volume.data.min())
    hi = float(volume.data.max())
    if hi > lo:
        norm = (plane - lo) / (hi - lo)
    else:
        norm = np.zeros_like(plane)
    gray = np.round(norm * 255.0).astype(np.uint8)
    return _to_png(Image.fromarray(gray, mode="L"))


def mask_slice_png(mask: LabelMap, axis: str, index: int) -> bytes:
    """RGBA PNG of one label plane using the class palette; background clear."""
    plane: SliceImage = extract_slice(mask, axis, index)
    ids = plane.pixels.astype(np.intp)
    rgba = np.zeros(ids.shape + (4,), dtype=np.uint8)
    for cid in np.unique(ids):
        if cid == 0 or int(cid) not in PALETTE:
            continue
        r, g, b = palette_rgb(int(cid))
        sel = ids == cid
        rgba[sel] = (r, g, b, 255)
    return _to_png(Image.fromarray(rgba, mode="RGBA"))
