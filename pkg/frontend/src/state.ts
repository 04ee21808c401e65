/** Viewer state: mirrors of server responses plus URL-shareable view parameters. */

import type { SegmentInfo } from "./api.js";
import { clampOrbit, Orbit, ORBIT_DEFAULTS } from "./orbit.js";

export type Level = "coarse" | "fine";
export type RenderMode = "full" | "isolate" | "highlight" | "hide-others";

export interface ViewerState {
  orbit: Orbit;
  time: number; // [0, 1]
  playing: boolean;
  level: Level;
  scale: number;
  tau: number;
  mode: RenderMode;
  selected: number | null; // segment or group id
  segments: SegmentInfo[];
  revision: number;
}

export function initialState(): ViewerState {
  return {
    orbit: { ...ORBIT_DEFAULTS },
    time: 0,
    playing: false,
    level: "coarse",
    scale: 0.15,
    tau: 0.75,
    mode: "full",
    selected: null,
    segments: [],
    revision: -1,
  };
}

export function clampTime(t: number): number {
  if (!Number.isFinite(t)) return 0;
  return Math.max(0, Math.min(1, t));
}

export function withTime(state: ViewerState, t: number): ViewerState {
  return { ...state, time: clampTime(t) };
}

export function withSegments(state: ViewerState, segments: SegmentInfo[], revision: number): ViewerState {
  const selected =
    state.selected !== null && segments.some((s) => s.segment_id === state.selected)
      ? state.selected
      : null;
  return { ...state, segments, revision, selected, mode: selected === null ? "full" : state.mode };
}

export function advanceTime(state: ViewerState, dt: number): ViewerState {
  // playback wraps at the end of the range
  let t = state.time + dt;
  if (t > 1) t -= 1;
  return { ...state, time: clampTime(t) };
}

// ---------------------------------------------------------------- URL codec

export function encodeStateToHash(state: ViewerState): string {
  const q = new URLSearchParams({
    az: state.orbit.azimuth.toFixed(4),
    el: state.orbit.elevation.toFixed(4),
    d: state.orbit.distance.toFixed(4),
    t: state.time.toFixed(4),
    level: state.level,
    scale: state.scale.toFixed(4),
    tau: state.tau.toFixed(3),
    mode: state.mode,
  });
  if (state.selected !== null) q.set("sel", String(state.selected));
  return "#" + q.toString();
}

export function decodeStateFromHash(hash: string, base?: ViewerState): ViewerState {
  const state = base ?? initialState();
  const raw = hash.startsWith("#") ? hash.slice(1) : hash;
  if (!raw) return state;
  const q = new URLSearchParams(raw);
  const num = (key: string, fallback: number) => {
    const v = Number(q.get(key));
    return Number.isFinite(v) && q.has(key) ? v : fallback;
  };
  const level = q.get("level");
  const mode = q.get("mode");
  return {
    ...state,
    orbit: clampOrbit({
      azimuth: num("az", state.orbit.azimuth),
      elevation: num("el", state.orbit.elevation),
      distance: num("d", state.orbit.distance),
    }),
    time: clampTime(num("t", state.time)),
    level: level === "fine" ? "fine" : "coarse",
    scale: num("scale", state.scale),
    tau: num("tau", state.tau),
    mode: (["full", "isolate", "highlight", "hide-others"] as const).includes(mode as RenderMode)
      ? (mode as RenderMode)
      : state.mode,
    selected: q.has("sel") ? Number(q.get("sel")) : null,
  };
}

/** Canvas click in CSS pixels -> image pixel coordinates, accounting for scaling. */
export function canvasToImagePixel(
  clickX: number,
  clickY: number,
  cssWidth: number,
  cssHeight: number,
  imageWidth: number,
  imageHeight: number,
): { x: number; y: number } {
  const x = Math.floor((clickX / cssWidth) * imageWidth);
  const y = Math.floor((clickY / cssHeight) * imageHeight);
  return {
    x: Math.max(0, Math.min(imageWidth - 1, x)),
    y: Math.max(0, Math.min(imageHeight - 1, y)),
  };
}
