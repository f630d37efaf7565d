// Pixel compositing for the overlay view.  The server renders the CT slice
// as grayscale and the mask slice as palette RGBA; the console only blends
// them - no segmentation is ever computed client-side.

import { classOfRgb } from "./palette.js";

export interface RgbaImage {
  width: number;
  height: number;
  data: Uint8ClampedArray; // RGBA, row-major
}

export function compositeOverlay(
  base: RgbaImage,
  mask: RgbaImage,
  hiddenClasses: Set<number>,
  opacity: number,
): RgbaImage {
  if (base.width !== mask.width || base.height !== mask.height) {
    throw new Error(
      `dim mismatch: base ${base.width}x${base.height} vs mask ${mask.width}x${mask.height}`,
    );
  }
  const out = new Uint8ClampedArray(base.data); // copy of the CT slice
  const n = base.width * base.height;
  for (let i = 0; i < n; i++) {
    const o = i * 4;
    const alpha = mask.data[o + 3];
    if (alpha === 0) continue; // background stays raw CT
    const r = mask.data[o];
    const g = mask.data[o + 1];
    const b = mask.data[o + 2];
    const cls = classOfRgb(r, g, b);
    if (cls !== undefined && hiddenClasses.has(cls)) continue; // fully transparent
    out[o] = Math.round(base.data[o] * (1 - opacity) + r * opacity);
    out[o + 1] = Math.round(base.data[o + 1] * (1 - opacity) + g * opacity);
    out[o + 2] = Math.round(base.data[o + 2] * (1 - opacity) + b * opacity);
    out[o + 3] = 255;
  }
  return { width: base.width, height: base.height, data: out };
}
