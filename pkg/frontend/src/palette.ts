// Fixed organ-class palette. Must stay byte-for-byte identical to the
// server's table (promptseg.service.render.PALETTE); background is
// transparent and never appears here.

export const PALETTE: Record<number, string> = {
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
};

export function paletteRgb(classId: number): [number, number, number] {
  const hex = PALETTE[classId];
  if (!hex) throw new Error(`no palette entry for class ${classId}`);
  return [
    parseInt(hex.slice(1, 3), 16),
    parseInt(hex.slice(3, 5), 16),
    parseInt(hex.slice(5, 7), 16),
  ];
}

// exact RGB -> class id lookup, used to recover classes from mask PNGs
const reverse = new Map<number, number>();
for (const id of Object.keys(PALETTE)) {
  const [r, g, b] = paletteRgb(Number(id));
  reverse.set((r << 16) | (g << 8) | b, Number(id));
}

export function classOfRgb(r: number, g: number, b: number): number | undefined {
  return reverse.get((r << 16) | (g << 8) | b);
}
