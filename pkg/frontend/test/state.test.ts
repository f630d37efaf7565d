import { describe, expect, it } from "vitest";
import type { ParseResponse, SegmentResponse, VolumeInfo } from "../src/api.js";
import {
  axisExtent,
  initialState,
  navigate,
  promptSubmitted,
  selectVolume,
  setIndex,
  switchAxis,
  toggleClass,
  errorBanner,
  dismissError,
} from "../src/state.js";

const VOLUME: VolumeInfo = {
  id: "vol_000",
  dims: [48, 32, 24],
  spacing: [1, 1, 1],
  has_labels: true,
};

function withVolume() {
  return selectVolume(initialState(), VOLUME);
}

const PARSE: ParseResponse = {
  presence: [0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0],
  mentioned: [
    { id: 2, name: "right kidney" },
    { id: 6, name: "liver" },
  ],
  relations: [],
  fallback_visual_only: false,
};

const SEGMENT: SegmentResponse = {
  mask_id: "m00000",
  voxel_counts: { "0": 100, "2": 10, "6": 20 },
  alpha_bias: new Array(14).fill(0),
  presence: PARSE.presence,
  relations_used: [],
  skipped_relations: [],
  fallback_visual_only: false,
};

describe("axis extents", () => {
  it("maps axes onto (D, H, W)", () => {
    expect(axisExtent(VOLUME, "axial")).toBe(48);
    expect(axisExtent(VOLUME, "coronal")).toBe(32);
    expect(axisExtent(VOLUME, "sagittal")).toBe(24);
  });
});

describe("navigate", () => {
  it("decrement at zero stays at zero", () => {
    let s = withVolume();
    s = setIndex(s, 0);
    expect(navigate(s, -1).index).toBe(0);
  });

  it("increment clamps at the last slice", () => {
    let s = withVolume();
    s = setIndex(s, 47);
    expect(navigate(s, +1).index).toBe(47);
    expect(navigate(s, +5).index).toBe(47);
  });

  it("axis switch resets the index to the midpoint", () => {
    let s = withVolume();
    s = setIndex(s, 3);
    expect(switchAxis(s, "coronal").index).toBe(16);
    expect(switchAxis(s, "sagittal").index).toBe(12);
  });

  it("selecting a volume clears the active mask", () => {
    let s = withVolume();
    s = promptSubmitted(s, "segment the liver", PARSE, SEGMENT);
    expect(s.maskId).toBe("m00000");
    s = selectVolume(s, VOLUME);
    expect(s.maskId).toBeNull();
  });
});

describe("toggles", () => {
  it("flips per-class visibility", () => {
    let s = withVolume();
    s = toggleClass(s, 6);
    expect(s.hiddenClasses.has(6)).toBe(true);
    s = toggleClass(s, 6);
    expect(s.hiddenClasses.has(6)).toBe(false);
  });
});

describe("promptSubmitted", () => {
  it("stores parse result, mask id, and appends history", () => {
    let s = withVolume();
    s = promptSubmitted(s, "segment the liver", PARSE, SEGMENT);
    expect(s.lastPrompt).toBe("segment the liver");
    expect(s.maskId).toBe("m00000");
    expect(s.history).toEqual(["segment the liver"]);
    expect(s.error).toBeNull();
  });

  it("does not duplicate an identical consecutive prompt", () => {
    let s = withVolume();
    s = promptSubmitted(s, "a", PARSE, SEGMENT);
    s = promptSubmitted(s, "a", PARSE, SEGMENT);
    s = promptSubmitted(s, "b", PARSE, SEGMENT);
    expect(s.history).toEqual(["a", "b"]);
  });
});

describe("error banner", () => {
  it("sets and dismisses without touching the view", () => {
    let s = withVolume();
    s = setIndex(s, 7);
    s = errorBanner(s, "422: nothing to segment");
    expect(s.error).toContain("422");
    expect(s.index).toBe(7);
    expect(dismissError(s).error).toBeNull();
  });
});
