// View state and its pure transitions.  Everything here is side-effect
// free so the navigation/toggle rules are directly unit-testable.

import type { ParseResponse, SegmentResponse, VolumeInfo } from "./api.js";

export type Axis = "axial" | "coronal" | "sagittal";

export const AXES: Axis[] = ["axial", "coronal", "sagittal"];

export interface ViewState {
  volume: VolumeInfo | null;
  axis: Axis;
  index: number;
  lastPrompt: string;
  parse: ParseResponse | null;
  segment: SegmentResponse | null;
  maskId: string | null;
  hiddenClasses: Set<number>;
  opacity: number;
  history: string[];
  error: string | null;
}

export function initialState(): ViewState {
  return {
    volume: null,
    axis: "axial",
    index: 0,
    lastPrompt: "",
    parse: null,
    segment: null,
    maskId: null,
    hiddenClasses: new Set(),
    opacity: 0.5,
    history: [],
    error: null,
  };
}

// dims are (D, H, W); the slice index runs over the fixed axis
export function axisExtent(volume: VolumeInfo, axis: Axis): number {
  const [d, h, w] = volume.dims;
  return axis === "axial" ? d : axis === "coronal" ? h : w;
}

export function clampIndex(state: ViewState, index: number): number {
  if (!state.volume) return 0;
  const extent = axisExtent(state.volume, state.axis);
  return Math.min(Math.max(index, 0), extent - 1);
}

export function navigate(state: ViewState, delta: number): ViewState {
  return { ...state, index: clampIndex(state, state.index + delta) };
}

export function setIndex(state: ViewState, index: number): ViewState {
  return { ...state, index: clampIndex(state, index) };
}

export function switchAxis(state: ViewState, axis: Axis): ViewState {
  if (!state.volume) return { ...state, axis, index: 0 };
  const midpoint = Math.floor(axisExtent(state.volume, axis) / 2);
  return { ...state, axis, index: midpoint };
}

export function selectVolume(state: ViewState, volume: VolumeInfo): ViewState {
  const next = { ...state, volume, maskId: null, segment: null };
  return switchAxis(next, state.axis);
}

export function toggleClass(state: ViewState, classId: number): ViewState {
  const hidden = new Set(state.hiddenClasses);
  if (hidden.has(classId)) hidden.delete(classId);
  else hidden.add(classId);
  return { ...state, hiddenClasses: hidden };
}

export function promptSubmitted(
  state: ViewState,
  prompt: string,
  parse: ParseResponse,
  segment: SegmentResponse,
): ViewState {
  const history = state.history[state.history.length - 1] === prompt
    ? state.history
    : [...state.history, prompt];
  return {
    ...state,
    lastPrompt: prompt,
    parse,
    segment,
    maskId: segment.mask_id,
    history,
    error: null,
  };
}

export function errorBanner(state: ViewState, message: string): ViewState {
  return { ...state, error: message };
}

export function dismissError(state: ViewState): ViewState {
  return { ...state, error: null };
}
