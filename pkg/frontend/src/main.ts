// Console wiring: DOM, keyboard, and the fetch layers.  All segmentation
// happens server-side; this file only orchestrates requests and drawing.

import { ApiError, Client, ModelInfo, VolumeInfo } from "./api.js";
import { biasChartData } from "./chart.js";
import { LayerFetcher } from "./fetching.js";
import { compositeOverlay, RgbaImage } from "./overlay.js";
import { PALETTE } from "./palette.js";
import {
  AXES,
  Axis,
  ViewState,
  dismissError,
  errorBanner,
  initialState,
  navigate,
  promptSubmitted,
  selectVolume,
  setIndex,
  switchAxis,
  toggleClass,
} from "./state.js";

const client = new Client("");
let state: ViewState = initialState();
let model: ModelInfo | null = null;
let volumes: VolumeInfo[] = [];
let baseImage: RgbaImage | null = null;
let maskImage: RgbaImage | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function loadRgba(url: string): Promise<RgbaImage> {
  const res = await fetch(url);
  if (!res.ok) throw new ApiError(res.status, `image fetch failed: ${url}`);
  const bitmap = await createImageBitmap(await res.blob());
  const canvas = document.createElement("canvas");
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  const ctx = canvas.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
  return { width: data.width, height: data.height, data: data.data };
}

const baseLayer = new LayerFetcher<RgbaImage>(loadRgba, (img) => {
  baseImage = img;
  redraw();
});
const maskLayer = new LayerFetcher<RgbaImage>(loadRgba, (img) => {
  maskImage = img;
  redraw();
});

function refetchSlices(): void {
  if (!state.volume) return;
  baseLayer.request(client.volumeSliceUrl(state.volume.id, state.axis, state.index));
  if (state.maskId) {
    maskLayer.request(client.maskSliceUrl(state.maskId, state.axis, state.index));
  } else {
    maskImage = null;
    redraw();
  }
}

function redraw(): void {
  const canvas = el<HTMLCanvasElement>("view");
  if (!baseImage) return;
  canvas.width = baseImage.width;
  canvas.height = baseImage.height;
  const ctx = canvas.getContext("2d")!;
  let shown = baseImage;
  if (maskImage && maskImage.width === baseImage.width && state.opacity > 0) {
    shown = compositeOverlay(baseImage, maskImage, state.hiddenClasses, state.opacity);
  }
  // fresh copy pins the backing store to a plain ArrayBuffer for ImageData
  const pixels = new Uint8ClampedArray(shown.data);
  ctx.putImageData(new ImageData(pixels, shown.width, shown.height), 0, 0);
  el<HTMLSpanElement>("slice-label").textContent =
    `${state.axis} ${state.index}`;
  const slider = el<HTMLInputElement>("slice-slider");
  if (state.volume) {
    const extent = { axial: state.volume.dims[0], coronal: state.volume.dims[1],
                     sagittal: state.volume.dims[2] }[state.axis];
    slider.max = String(extent - 1);
    slider.value = String(state.index);
  }
}

function renderChips(): void {
  const box = el<HTMLDivElement>("chips");
  box.innerHTML = "";
  if (!state.parse) return;
  for (const organ of state.parse.mentioned) {
    const chip = document.createElement("span");
    chip.className = "chip";
    chip.style.setProperty("--chip-color", PALETTE[organ.id] ?? "#888");
    chip.textContent = organ.name;
    chip.dataset.classId = String(organ.id);
    box.appendChild(chip);
  }
  for (const rel of state.parse.relations) {
    const chip = document.createElement("span");
    chip.className = "chip relation";
    chip.textContent = `${rel.target_name} near ${rel.anchor_name}`;
    box.appendChild(chip);
  }
  el<HTMLSpanElement>("fallback-badge").hidden =
    !(state.segment?.fallback_visual_only ?? state.parse.fallback_visual_only);
}

function renderBiasChart(): void {
  const box = el<HTMLDivElement>("bias-chart");
  box.innerHTML = "";
  if (!state.segment || !model) return;
  const bars = biasChartData(state.segment.alpha_bias, model.classes, state.segment.presence);
  for (const bar of bars) {
    const row = document.createElement("div");
    row.className = "bias-row" + (bar.mentioned ? " mentioned" : "");
    const label = document.createElement("span");
    label.className = "bias-label";
    label.textContent = bar.name;
    const track = document.createElement("div");
    track.className = "bias-track";
    const fill = document.createElement("div");
    fill.className = "bias-fill " + (bar.value >= 0 ? "pos" : "neg");
    fill.style.width = `${Math.abs(bar.fraction) * 50}%`;
    fill.style.background = PALETTE[bar.classId] ?? "#888";
    if (bar.value >= 0) fill.style.left = "50%";
    else fill.style.right = "50%";
    track.appendChild(fill);
    const value = document.createElement("span");
    value.className = "bias-value";
    value.textContent = bar.value.toFixed(2);
    row.append(label, track, value);
    box.appendChild(row);
  }
}

function renderToggles(): void {
  const box = el<HTMLDivElement>("toggles");
  box.innerHTML = "";
  if (!model) return;
  for (const organ of model.classes) {
    const label = document.createElement("label");
    label.className = "toggle";
    const input = document.createElement("input");
    input.type = "checkbox";
    input.checked = !state.hiddenClasses.has(organ.id);
    input.addEventListener("change", () => {
      state = toggleClass(state, organ.id);
      redraw();
    });
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.background = PALETTE[organ.id] ?? "#888";
    label.append(input, swatch, document.createTextNode(organ.name));
    box.appendChild(label);
  }
}

function renderHistory(): void {
  const list = el<HTMLUListElement>("history");
  list.innerHTML = "";
  for (const prompt of [...state.history].reverse()) {
    const item = document.createElement("li");
    const link = document.createElement("a");
    link.href = "#";
    link.textContent = prompt;
    link.addEventListener("click", (ev) => {
      ev.preventDefault();
      el<HTMLInputElement>("prompt").value = prompt;
      void submitPrompt(prompt);
    });
    item.appendChild(link);
    list.appendChild(item);
  }
}

function renderError(): void {
  const banner = el<HTMLDivElement>("error-banner");
  banner.hidden = state.error === null;
  el<HTMLSpanElement>("error-text").textContent = state.error ?? "";
}

async function submitPrompt(prompt: string): Promise<void> {
  if (!state.volume) {
    state = errorBanner(state, "select a volume first");
    renderError();
    return;
  }
  try {
    const parsed = await client.parse(prompt);
    const restrict = el<HTMLInputElement>("restrict").checked;
    const segmented = await client.segment(state.volume.id, prompt, restrict);
    state = promptSubmitted(state, prompt, parsed, segmented);
    renderChips();
    renderBiasChart();
    renderHistory();
    renderError();
    refetchSlices();
  } catch (err) {
    const message = err instanceof ApiError
      ? `${err.status}: ${err.message}`
      : String(err);
    state = errorBanner(state, message);
    renderError();
  }
}

function wireControls(): void {
  el<HTMLFormElement>("prompt-form").addEventListener("submit", (ev) => {
    ev.preventDefault();
    void submitPrompt(el<HTMLInputElement>("prompt").value);
  });
  el<HTMLButtonElement>("error-dismiss").addEventListener("click", () => {
    state = dismissError(state);
    renderError();
  });
  for (const axis of AXES) {
    el<HTMLButtonElement>(`axis-${axis}`).addEventListener("click", () => {
      state = switchAxis(state, axis as Axis);
      refetchSlices();
      redraw();
    });
  }
  el<HTMLInputElement>("slice-slider").addEventListener("input", (ev) => {
    state = setIndex(state, Number((ev.target as HTMLInputElement).value));
    refetchSlices();
  });
  el<HTMLInputElement>("opacity").addEventListener("input", (ev) => {
    state = { ...state, opacity: Number((ev.target as HTMLInputElement).value) / 100 };
    redraw();
  });
  document.addEventListener("keydown", (ev) => {
    if (ev.target instanceof HTMLInputElement) return;
    if (ev.key === "ArrowUp" || ev.key === "ArrowRight") {
      state = navigate(state, +1);
      refetchSlices();
    } else if (ev.key === "ArrowDown" || ev.key === "ArrowLeft") {
      state = navigate(state, -1);
      refetchSlices();
    }
  });
  el<HTMLSelectElement>("volume-select").addEventListener("change", (ev) => {
    const id = (ev.target as HTMLSelectElement).value;
    const vol = volumes.find((v) => v.id === id);
    if (vol) {
      state = selectVolume(state, vol);
      maskImage = null;
      refetchSlices();
    }
  });
}

async function boot(): Promise<void> {
  wireControls();
  try {
    model = await client.model();
    volumes = await client.volumes();
  } catch (err) {
    state = errorBanner(state, `service unreachable: ${String(err)}`);
    renderError();
    return;
  }
  el<HTMLSpanElement>("model-info").textContent =
    `alpha=${model.alpha.toFixed(3)} beta=${model.beta.toFixed(3)} ` +
    `ckpt=${model.checkpoint_hash || "n/a"}`;
  const select = el<HTMLSelectElement>("volume-select");
  for (const vol of volumes) {
    const option = document.createElement("option");
    option.value = vol.id;
    option.textContent = `${vol.id} (${vol.dims.join("x")})`;
    select.appendChild(option);
  }
  renderToggles();
  if (volumes.length) {
    state = selectVolume(state, volumes[0]);
    refetchSlices();
  }
}

if (typeof document !== "undefined" && document.getElementById("view")) {
  void boot();
}
