"""HTTP service: rendering, segmentation, tracking, and editing for the viewer.

One in-memory model snapshot (immutable after load) plus a segment/edit
registry with snapshot isolation by revision. Long-running affinity training
runs as a single background job at a time, FIFO.
"""

from __future__ import annotations

import io
import math
import queue
import threading
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from .checkpoint import Checkpoint, affinity_key
from .coarse import coarse_segmentation, segment_of_pixel
from .dataset import Dataset, GroundTruthMaskProvider
from .fine import AffinityConfig, DirectoryMaskProvider, ingest_masks, segment_by_click, train_affinity
from .render import render
from .scene import Camera
from .tracking import SegmentRegistry, scene_render


@dataclass
class Job:
    job_id: int
    status: str = "queued"  # queued -> running -> done | error
    detail: str = ""
    result: Optional[dict] = None


@dataclass
class SessionState:
    checkpoint: Optional[Checkpoint] = None
    dataset: Optional[Dataset] = None
    registry: SegmentRegistry = field(default_factory=SegmentRegistry)
    jobs: dict[int, Job] = field(default_factory=dict)

    def __post_init__(self):
        self._job_queue: "queue.Queue[tuple[Job, callable]]" = queue.Queue()
        self._job_lock = threading.Lock()
        self._next_job = 1
        self._worker = threading.Thread(target=self._job_loop, daemon=True)
        self._worker.start()

    @property
    def revision(self) -> int:
        return self.registry.revision

    def submit_job(self, fn) -> Job:
        with self._job_lock:
            job = Job(self._next_job)
            self._next_job += 1
            self.jobs[job.job_id] = job
        self._job_queue.put((job, fn))
        return job

    def _job_loop(self):
        while True:
            job, fn = self._job_queue.get()
            job.status = "running"
            try:
                job.result = fn()
                job.status = "done"
            except Exception as exc:
                job.status = "error"
                job.detail = f"{exc}"
                traceback.print_exc()


class PoseParams(BaseModel):
    position: list[float]
    look_at: list[float] = [0.0, 0.0, 0.0]
    fov_y: float = 0.75


class PickRequest(BaseModel):
    x: int
    y: int
    time: float = 0.0
    level: str = "coarse"  # coarse | fine
    scale: float = 0.2
    tau: float = 0.75
    view: Optional[str] = None
    pose: Optional[PoseParams] = None
    width: int = 256
    height: int = 256
    name: Optional[str] = None


class CoarseRequest(BaseModel):
    k: int
    seed: int = 0


class AffinityTrainRequest(BaseModel):
    label: int
    time: float = 0.0
    masks_dir: Optional[str] = None  # directory provider; None -> bundled GT provider
    iters: int = 5000
    batch_pixels: int = 8192
    lr: float = 1e-3
    seed: int = 0


class EditRequest(BaseModel):
    kind: str
    rgb: Optional[list[float]] = None
    factor: Optional[float] = None
    translation: Optional[list[float]] = None
    scale: Optional[float] = None


class GroupRequest(BaseModel):
    ids: list[int]


def _png_bytes(image: torch.Tensor) -> bytes:
    arr = (image.clamp(0, 1).cpu().numpy() * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def create_app(state: SessionState, frontend_dir: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="dynsplat service", docs_url="/docs")

    def model_or_404() -> Checkpoint:
        if state.checkpoint is None:
            raise HTTPException(404, "no model loaded")
        return state.checkpoint

    def resolve_camera(
        view: Optional[str], pose: Optional[PoseParams], width: int, height: int
    ) -> Camera:
        if pose is not None:
            return Camera.look_at(pose.position, pose.look_at, pose.fov_y, width, height)
        if view is not None:
            if state.dataset is None:
                raise HTTPException(400, "named views need a dataset (--data)")
            for cam in state.dataset.train_cameras + state.dataset.test_cameras:
                if cam.name == view:
                    return cam
            raise HTTPException(400, f"unknown view {view!r}")
        raise HTTPException(400, "provide either view= or pose parameters")

    def parse_time(t: float) -> float:
        if not (0.0 <= t <= 1.0) or not math.isfinite(t):
            raise HTTPException(400, "time must lie in [0, 1]")
        return t

    # ------------------------------------------------------------ frames

    @app.get("/frame")
    def frame(
        time: float = 0.0,
        mode: str = "full",
        segments: Optional[str] = None,
        view: Optional[str] = None,
        px: Optional[str] = None,
        lx: Optional[str] = None,
        fov: float = 0.75,
        width: int = 256,
        height: int = 256,
    ):
        ckpt = model_or_404()
        t = parse_time(time)
        pose = None
        if px is not None:
            try:
                position = [float(v) for v in px.split(",")]
                look_at = [float(v) for v in (lx or "0,0,0").split(",")]
            except ValueError:
                raise HTTPException(400, "bad pose numbers")
            pose = PoseParams(position=position, look_at=look_at, fov_y=fov)
        camera = resolve_camera(view, pose, width, height)

        snapshot = state.registry.snapshot()
        target = None
        if segments:
            try:
                target = int(segments)
            except ValueError:
                raise HTTPException(400, f"bad segment id {segments!r}")
            try:
                snapshot.member_gaussian_ids(target)
            except KeyError:
                raise HTTPException(400, f"unknown segment id {target}")
        if mode not in ("full", "isolate", "highlight", "hide-others"):
            raise HTTPException(400, f"unknown mode {mode!r}")
        if mode != "full" and target is None:
            raise HTTPException(400, "segment render modes need segments=<id>")

        out = scene_render(ckpt.gaussians, ckpt.field, snapshot, t, camera, mode, target)
        return Response(
            content=_png_bytes(out.image),
            media_type="image/png",
            headers={"X-Revision": str(snapshot.revision)},
        )

    # ------------------------------------------------------------ segmentation

    @app.post("/segment/coarse")
    def segment_coarse(req: CoarseRequest):
        ckpt = model_or_404()
        seg = coarse_segmentation(ckpt.gaussians, req.k, req.seed)
        ckpt.coarse = seg
        state.registry.bump()
        counts = {int(label): int((seg.labels == label).sum()) for label in range(seg.k)}
        return {
            "k": seg.k,
            "centroids": seg.centroids.tolist(),
            "counts": counts,
            "revision": state.revision,
        }

    @app.post("/segment/pick")
    def segment_pick(req: PickRequest):
        ckpt = model_or_404()
        t = parse_time(req.time)
        camera = resolve_camera(req.view, req.pose, req.width, req.height)
        if ckpt.coarse is None:
            raise HTTPException(409, "run coarse segmentation first (POST /segment/coarse)")
        deformed = ckpt.field.deform(ckpt.gaussians, t) if ckpt.field else ckpt.gaussians
        with torch.no_grad():
            out = render(deformed, camera, with_contrib=True)
        label = segment_of_pixel(out, ckpt.gaussians, ckpt.coarse, req.x, req.y)
        if label is None:
            return Response(status_code=204)

        if req.level == "coarse":
            ids = ckpt.coarse.ids_of(label)
            name = req.name or f"coarse-{label}"
            provenance = {"level": "coarse", "label": int(label), "time": t}
        elif req.level == "fine":
            key = affinity_key(label, t)
            afield = ckpt.affinity.get(key)
            if afield is None:
                raise HTTPException(
                    409,
                    f"no affinity field trained for coarse label {label} at time {t:.6f}; "
                    f"POST /affinity/train with {{label: {label}, time: {t}}} first",
                )
            member_ids = ckpt.coarse.ids_of(label)
            members = deformed.select(_rows_of(ckpt.gaussians, member_ids))
            fine = segment_by_click(members, afield, label, camera, req.x, req.y, req.scale, req.tau)
            if fine is None or fine.ids.size == 0:
                return Response(status_code=204)
            ids = fine.ids
            name = req.name or f"fine-{label}-s{req.scale:.2f}"
            provenance = {
                "level": "fine", "label": int(label), "time": t,
                "scale": req.scale, "tau": req.tau,
            }
        else:
            raise HTTPException(400, f"unknown level {req.level!r}")

        segment = state.registry.add_segment(name, ids, provenance)
        return {
            "segment_id": segment.segment_id,
            "name": segment.name,
            "gaussian_count": int(segment.ids.size),
            "label": int(label),
            "revision": state.revision,
        }

    @app.post("/affinity/train")
    def affinity_train(req: AffinityTrainRequest):
        ckpt = model_or_404()
        t = parse_time(req.time)
        if ckpt.coarse is None:
            raise HTTPException(409, "run coarse segmentation first")
        label = req.label
        masks_dir = req.masks_dir

        def run():
            member_ids = ckpt.coarse.ids_of(label)
            members = ckpt.gaussians.select(_rows_of(ckpt.gaussians, member_ids))
            if masks_dir is not None:
                provider = DirectoryMaskProvider(masks_dir)
            else:
                if state.dataset is None:
                    raise RuntimeError("bundled GT mask provider needs a dataset (--data)")
                provider = GroundTruthMaskProvider(
                    state.dataset, state.dataset.t_index_of(t), include_parent=True
                )
            views = [(str(i), cam) for i, cam in enumerate(state.dataset.train_cameras)] \
                if state.dataset else []
            if not views:
                raise RuntimeError("no views available for mask ingestion")
            mask_set = ingest_masks(
                provider, members, views, t, label, deform=ckpt.field
            )
            cfg = AffinityConfig(iters=req.iters, batch_pixels=req.batch_pixels, lr=req.lr)
            deformed = ckpt.field.deform(members, t) if ckpt.field else members
            afield = train_affinity(mask_set, deformed, cfg, seed=req.seed)
            ckpt.affinity[affinity_key(label, t)] = afield
            state.registry.bump()
            return {"label": label, "time": t, "views": len(mask_set.views)}

        job = state.submit_job(run)
        return {"job_id": job.job_id, "status": job.status}

    @app.get("/job/{job_id}")
    def job_status(job_id: int):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        return {"job_id": job.job_id, "status": job.status, "detail": job.detail, "result": job.result}

    # ------------------------------------------------------------ segments & edits

    @app.get("/segments")
    def segments():
        snap = state.registry.snapshot()
        return {
            "revision": snap.revision,
            "segments": [
                {
                    "segment_id": s.segment_id,
                    "name": s.name,
                    "gaussian_count": int(s.ids.size),
                    "provenance": s.provenance,
                }
                for s in snap.segments.values()
            ],
            "groups": [
                {"group_id": g.group_id, "member_ids": g.member_ids} for g in snap.groups.values()
            ],
            "edits": len(snap.edits),
        }

    @app.post("/segment/{segment_id}/edit")
    def segment_edit(segment_id: int, req: EditRequest):
        model_or_404()
        from .tracking import Edit

        snap = state.registry.snapshot()
        if segment_id not in snap.segments and segment_id not in snap.groups:
            raise HTTPException(404, f"unknown segment {segment_id}")
        edit = Edit(
            segment_id=segment_id,
            kind=req.kind,
            rgb=tuple(req.rgb) if req.rgb else None,
            factor=req.factor,
            translation=tuple(req.translation) if req.translation else None,
            scale=req.scale,
        )
        if edit.kind == "affine":
            ckpt = state.checkpoint
            ids = snap.member_gaussian_ids(segment_id)
            rows = _rows_of(ckpt.gaussians, ids)
            creation_t = 0.0
            if segment_id in snap.segments:
                creation_t = float(snap.segments[segment_id].provenance.get("time", 0.0))
            with torch.no_grad():
                deformed = ckpt.field.deform(ckpt.gaussians, creation_t) if ckpt.field else ckpt.gaussians
                edit.pivot = tuple(float(v) for v in deformed.means[rows].mean(dim=0))
            if edit.translation is None:
                edit.translation = (0.0, 0.0, 0.0)
        try:
            edit.validate()
            state.registry.add_edit(edit)
        except ValueError as exc:
            raise HTTPException(400, str(exc))
        except KeyError as exc:
            raise HTTPException(404, str(exc))
        return {"revision": state.revision}

    @app.post("/segments/group")
    def segments_group(req: GroupRequest):
        try:
            group = state.registry.add_group(req.ids)
        except KeyError as exc:
            raise HTTPException(404, str(exc))
        return {"group_id": group.group_id, "revision": state.revision}

    @app.delete("/segment/{segment_id}")
    def segment_delete(segment_id: int):
        try:
            state.registry.delete_segment(segment_id)
        except KeyError as exc:
            raise HTTPException(404, str(exc))
        return {"revision": state.revision}

    @app.get("/state")
    def state_info():
        ckpt = state.checkpoint
        return {
            "revision": state.revision,
            "model": ckpt is not None,
            "n_gaussians": ckpt.gaussians.count if ckpt else 0,
            "coarse_k": ckpt.coarse.k if ckpt and ckpt.coarse else None,
            "affinity_keys": sorted(ckpt.affinity) if ckpt else [],
            "views": [c.name for c in (state.dataset.train_cameras if state.dataset else [])],
            "timesteps": state.dataset.timesteps if state.dataset else [],
        }

    # ------------------------------------------------------------ static viewer

    if frontend_dir and Path(frontend_dir).exists():
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="viewer")

    return app


def _rows_of(gaussians, ids: np.ndarray) -> torch.Tensor:
    wanted = torch.from_numpy(np.asarray(ids, dtype=np.int64))
    return torch.isin(gaussians.ids, wanted)
