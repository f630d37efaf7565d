// Data prep for the per-class bias chart (alpha * b), which shows the
// fusion mechanism acting: positive bars push a class up everywhere,
// negative bars suppress it.

import type { OrganInfo } from "./api.js";

export interface BiasBar {
  classId: number;
  name: string;
  value: number;
  // signed fraction of the largest magnitude, for bar widths in [-1, 1]
  fraction: number;
  mentioned: boolean;
}

export function biasChartData(
  alphaBias: number[],
  classes: OrganInfo[],
  presence: number[],
): BiasBar[] {
  const byId = new Map(classes.map((c) => [c.id, c.name]));
  const bars: BiasBar[] = [];
  let peak = 0;
  for (let id = 1; id < alphaBias.length; id++) {
    peak = Math.max(peak, Math.abs(alphaBias[id]));
  }
  for (let id = 1; id < alphaBias.length; id++) {
    const name = byId.get(id);
    if (!name) continue;
    bars.push({
      classId: id,
      name,
      value: alphaBias[id],
      fraction: peak > 0 ? alphaBias[id] / peak : 0,
      mentioned: presence[id] === 1,
    });
  }
  return bars;
}
