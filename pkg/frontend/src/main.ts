/** DOM wiring for the viewer; all logic lives in the imported modules. */

import { ApiClient, FrameResult, Pose } from "./api.js";
import { FrameLoop } from "./debounce.js";
import { orbitToPose, rotate, zoom } from "./orbit.js";
import {
  ViewerState,
  advanceTime,
  canvasToImagePixel,
  decodeStateFromHash,
  encodeStateToHash,
  initialState,
  withSegments,
  withTime,
} from "./state.js";

const FRAME_SIZE = 512;
const PLAYBACK_FPS = 8;

const api = new ApiClient("");
let state: ViewerState = decodeStateFromHash(window.location.hash, initialState());

const el = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;
const canvas = el<HTMLCanvasElement>("view");
const ctx = canvas.getContext("2d")!;
canvas.width = FRAME_SIZE;
canvas.height = FRAME_SIZE;

function framePose(): Pose {
  return orbitToPose(state.orbit);
}

const frames = new FrameLoop<ReturnType<typeof frameParams>, FrameResult>(
  (params) => api.frame(params),
  async (result) => {
    const bitmap = await createImageBitmap(result.blob);
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(bitmap, 0, 0, canvas.width, canvas.height);
    if (result.revision !== state.revision) await syncSegments();
    banner("");
  },
  () => banner("service unreachable; showing the last frame"),
);

function frameParams() {
  return {
    time: state.time,
    pose: framePose(),
    width: FRAME_SIZE,
    height: FRAME_SIZE,
    mode: state.selected === null ? "full" : state.mode,
    segments: state.selected === null || state.mode === "full" ? undefined : state.selected,
  };
}

function refresh() {
  window.history.replaceState(null, "", encodeStateToHash(state));
  frames.request(frameParams());
}

function banner(text: string) {
  const node = el<HTMLDivElement>("banner");
  node.textContent = text;
  node.style.display = text ? "block" : "none";
}

function toast(text: string) {
  const node = el<HTMLDivElement>("toast");
  node.textContent = text;
  node.style.display = "block";
  setTimeout(() => (node.style.display = "none"), 2500);
}

// ------------------------------------------------------------------ camera

let dragging = false;
let last = { x: 0, y: 0 };
canvas.addEventListener("mousedown", (e) => {
  dragging = true;
  last = { x: e.clientX, y: e.clientY };
});
window.addEventListener("mouseup", () => (dragging = false));
window.addEventListener("mousemove", (e) => {
  if (!dragging) return;
  state = {
    ...state,
    orbit: rotate(state.orbit, (e.clientX - last.x) * 0.008, (e.clientY - last.y) * 0.008),
  };
  last = { x: e.clientX, y: e.clientY };
  refresh();
});
canvas.addEventListener("wheel", (e) => {
  e.preventDefault();
  state = { ...state, orbit: zoom(state.orbit, e.deltaY > 0 ? 1.1 : 0.9) };
  refresh();
});

// ------------------------------------------------------------------ click to segment

canvas.addEventListener("click", async (e) => {
  if (dragging) return;
  const rect = canvas.getBoundingClientRect();
  const { x, y } = canvasToImagePixel(
    e.clientX - rect.left, e.clientY - rect.top, rect.width, rect.height, FRAME_SIZE, FRAME_SIZE,
  );
  try {
    const result = await api.pick({
      x, y,
      time: state.time,
      level: state.level,
      scale: state.scale,
      tau: state.tau,
      pose: framePose(),
      width: FRAME_SIZE,
      height: FRAME_SIZE,
    });
    if (result === null) {
      toast("no segment here");
      return;
    }
    await syncSegments();
    state = { ...state, selected: result.segment_id, mode: "highlight" };
    refresh();
  } catch (err) {
    const status = (err as Error & { status?: number }).status;
    if (status === 409 && state.level === "fine") {
      offerAffinityTraining();
    } else if (status === 409) {
      el<HTMLDivElement>("coarse-panel").style.display = "block";
    } else {
      toast(String(err));
    }
  }
});

function offerAffinityTraining() {
  const panel = el<HTMLDivElement>("affinity-panel");
  panel.style.display = "block";
  el<HTMLButtonElement>("affinity-go").onclick = async () => {
    panel.style.display = "none";
    toast("training affinity field...");
    try {
      const labelRaw = prompt("coarse label to refine", "0") ?? "0";
      const { job_id } = await api.trainAffinity(Number(labelRaw), state.time);
      await pollJob(job_id);
      toast("affinity field ready; click again");
    } catch (err) {
      toast(String(err));
    }
  };
}

async function pollJob(jobId: number): Promise<void> {
  for (;;) {
    const status = await api.jobStatus(jobId);
    if (status.status === "done") return;
    if (status.status === "error") throw new Error(status.detail);
    await new Promise((resolve) => setTimeout(resolve, 1000));
  }
}

// ------------------------------------------------------------------ segments list

async function syncSegments() {
  const response = await api.segments();
  state = withSegments(state, response.segments, response.revision);
  const list = el<HTMLUListElement>("segments");
  list.innerHTML = "";
  for (const seg of state.segments) {
    const li = document.createElement("li");
    li.textContent = `#${seg.segment_id} ${seg.name} (${seg.gaussian_count})`;
    if (seg.segment_id === state.selected) li.classList.add("selected");
    for (const mode of ["isolate", "highlight", "hide-others"] as const) {
      const btn = document.createElement("button");
      btn.textContent = mode;
      btn.onclick = () => {
        state = { ...state, selected: seg.segment_id, mode };
        refresh();
      };
      li.appendChild(btn);
    }
    const del = document.createElement("button");
    del.textContent = "x";
    del.onclick = async () => {
      await api.deleteSegment(seg.segment_id);
      await syncSegments();
      refresh();
    };
    li.appendChild(del);
    list.appendChild(li);
  }
}

el<HTMLButtonElement>("show-all").onclick = () => {
  state = { ...state, selected: null, mode: "full" };
  refresh();
};

el<HTMLButtonElement>("group").onclick = async () => {
  const ids = state.segments.map((s) => s.segment_id);
  if (ids.length < 2) {
    toast("need at least two segments to group");
    return;
  }
  const { group_id } = await api.group(ids);
  state = { ...state, selected: group_id, mode: "isolate" };
  await syncSegments();
  refresh();
};

el<HTMLButtonElement>("run-coarse").onclick = async () => {
  const k = Number(el<HTMLInputElement>("coarse-k").value) || 2;
  await api.coarseSegment(k);
  el<HTMLDivElement>("coarse-panel").style.display = "none";
  toast(`coarse segmentation with k=${k} done; click a structure`);
};

// ------------------------------------------------------------------ edit panel

el<HTMLButtonElement>("edit-recolor").onclick = async () => {
  if (state.selected === null) return toast("select a segment first");
  const hex = el<HTMLInputElement>("edit-color").value;
  const rgb: [number, number, number] = [
    parseInt(hex.slice(1, 3), 16) / 255,
    parseInt(hex.slice(3, 5), 16) / 255,
    parseInt(hex.slice(5, 7), 16) / 255,
  ];
  await api.edit(state.selected, { kind: "recolor", rgb });
  refresh();
};

el<HTMLButtonElement>("edit-opacity").onclick = async () => {
  if (state.selected === null) return toast("select a segment first");
  const factor = Number(el<HTMLInputElement>("edit-opacity-factor").value);
  if (!(factor > 0)) return toast("opacity factor must be > 0");
  await api.edit(state.selected, { kind: "opacity_scale", factor });
  refresh();
};

el<HTMLButtonElement>("edit-transform").onclick = async () => {
  if (state.selected === null) return toast("select a segment first");
  const value = (id: string) => Number(el<HTMLInputElement>(id).value) || 0;
  const scale = Number(el<HTMLInputElement>("edit-scale").value);
  if (!(scale > 0)) return toast("scale must be > 0");
  await api.edit(state.selected, {
    kind: "affine",
    translation: [value("edit-tx"), value("edit-ty"), value("edit-tz")],
    scale,
  });
  refresh();
};

// ------------------------------------------------------------------ time + playback

const timeSlider = el<HTMLInputElement>("time");
timeSlider.oninput = () => {
  state = withTime(state, Number(timeSlider.value));
  el<HTMLSpanElement>("time-label").textContent = state.time.toFixed(2);
  refresh();
};

let playTimer: number | null = null;
el<HTMLButtonElement>("play").onclick = () => {
  if (playTimer !== null) {
    clearInterval(playTimer);
    playTimer = null;
    state = { ...state, playing: false };
    el<HTMLButtonElement>("play").textContent = "play";
    return;
  }
  state = { ...state, playing: true };
  el<HTMLButtonElement>("play").textContent = "pause";
  playTimer = window.setInterval(() => {
    state = advanceTime(state, 1 / (PLAYBACK_FPS * 4));
    timeSlider.value = String(state.time);
    el<HTMLSpanElement>("time-label").textContent = state.time.toFixed(2);
    refresh();
  }, 1000 / PLAYBACK_FPS);
};

// ------------------------------------------------------------------ controls mirror

for (const [id, key] of [["scale", "scale"], ["tau", "tau"]] as const) {
  const input = el<HTMLInputElement>(id);
  input.value = String(state[key]);
  input.oninput = () => {
    state = { ...state, [key]: Number(input.value) };
    el<HTMLSpanElement>(`${id}-label`).textContent = Number(input.value).toFixed(2);
  };
}
for (const level of ["coarse", "fine"] as const) {
  el<HTMLInputElement>(`level-${level}`).onchange = () => {
    state = { ...state, level };
  };
}

// revision polling keeps multiple clients in sync (1 Hz)
window.setInterval(async () => {
  try {
    const info = await api.state();
    if (info.revision !== state.revision) {
      await syncSegments();
      refresh();
    }
  } catch {
    /* offline: the banner from the frame loop covers it */
  }
}, 1000);

timeSlider.value = String(state.time);
el<HTMLSpanElement>("time-label").textContent = state.time.toFixed(2);
syncSegments().catch(() => banner("service unreachable"));
refresh();
