/** Typed client for the render/segmentation service. */

export interface Pose {
  position: [number, number, number];
  look_at: [number, number, number];
  fov_y: number;
}

export interface PickResult {
  segment_id: number;
  name: string;
  gaussian_count: number;
  label: number;
  revision: number;
}

export interface SegmentInfo {
  segment_id: number;
  name: string;
  gaussian_count: number;
  provenance: Record<string, unknown>;
}

export interface SegmentsResponse {
  revision: number;
  segments: SegmentInfo[];
  groups: { group_id: number; member_ids: number[] }[];
  edits: number;
}

export interface FrameResult {
  blob: Blob;
  revision: number;
}

export interface JobStatus {
  job_id: number;
  status: "queued" | "running" | "done" | "error";
  detail: string;
}

export type EditSpec =
  | { kind: "recolor"; rgb: [number, number, number] }
  | { kind: "opacity_scale"; factor: number }
  | { kind: "affine"; translation: [number, number, number]; scale: number };

export interface FrameOptions {
  time: number;
  pose: Pose;
  width: number;
  height: number;
  mode?: string;
  segments?: number;
}

export function frameUrl(base: string, opts: FrameOptions): string {
  const q = new URLSearchParams({
    time: String(opts.time),
    px: opts.pose.position.join(","),
    lx: opts.pose.look_at.join(","),
    fov: String(opts.pose.fov_y),
    width: String(opts.width),
    height: String(opts.height),
  });
  if (opts.mode && opts.mode !== "full") q.set("mode", opts.mode);
  if (opts.segments !== undefined) q.set("segments", String(opts.segments));
  return `${base}/frame?${q.toString()}`;
}

export class ApiClient {
  constructor(private base: string = "") {}

  async frame(opts: FrameOptions): Promise<FrameResult> {
    const res = await fetch(frameUrl(this.base, opts));
    if (!res.ok) throw new Error(`frame failed: ${res.status}`);
    return {
      blob: await res.blob(),
      revision: Number(res.headers.get("X-Revision") ?? "-1"),
    };
  }

  async coarseSegment(k: number, seed = 0): Promise<{ k: number; counts: Record<string, number> }> {
    return this.postJson("/segment/coarse", { k, seed });
  }

  /** null means the click hit empty background (204). */
  async pick(body: {
    x: number;
    y: number;
    time: number;
    level: "coarse" | "fine";
    scale: number;
    tau: number;
    pose: Pose;
    width: number;
    height: number;
  }): Promise<PickResult | null> {
    const res = await fetch(`${this.base}/segment/pick`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (res.status === 204) return null;
    if (!res.ok) {
      const detail = await res.json().catch(() => ({}));
      const err = new Error(detail.detail ?? `pick failed: ${res.status}`);
      (err as Error & { status?: number }).status = res.status;
      throw err;
    }
    return res.json();
  }

  async trainAffinity(label: number, time: number, iters?: number): Promise<{ job_id: number }> {
    const body: Record<string, unknown> = { label, time };
    if (iters !== undefined) body.iters = iters;
    return this.postJson("/affinity/train", body);
  }

  async jobStatus(jobId: number): Promise<JobStatus> {
    const res = await fetch(`${this.base}/job/${jobId}`);
    if (!res.ok) throw new Error(`job ${jobId}: ${res.status}`);
    return res.json();
  }

  async segments(): Promise<SegmentsResponse> {
    const res = await fetch(`${this.base}/segments`);
    if (!res.ok) throw new Error(`segments: ${res.status}`);
    return res.json();
  }

  async edit(segmentId: number, spec: EditSpec): Promise<{ revision: number }> {
    return this.postJson(`/segment/${segmentId}/edit`, spec);
  }

  async group(ids: number[]): Promise<{ group_id: number }> {
    return this.postJson("/segments/group", { ids });
  }

  async deleteSegment(segmentId: number): Promise<void> {
    const res = await fetch(`${this.base}/segment/${segmentId}`, { method: "DELETE" });
    if (!res.ok) throw new Error(`delete: ${res.status}`);
  }

  async state(): Promise<{ revision: number; model: boolean; n_gaussians: number }> {
    const res = await fetch(`${this.base}/state`);
    if (!res.ok) throw new Error(`state: ${res.status}`);
    return res.json();
  }

  private async postJson<T>(path: string, body: unknown): Promise<T> {
    const res = await fetch(`${this.base}${path}`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) {
      const detail = await res.json().catch(() => ({}));
      const err = new Error((detail as { detail?: string }).detail ?? `${path}: ${res.status}`);
      (err as Error & { status?: number }).status = res.status;
      throw err;
    }
    return res.json();
  }
}
