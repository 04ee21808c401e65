"""Segment registry, grouped tracking, and persistent declarative edits.

Segments are id sets over canonical Gaussians, so membership is constant over
time and tracking is just deformation. Edits are replayed on the deformed set
every frame (recolor, opacity scaling, affine transform about a pivot fixed at
creation); the trained model itself is never mutated.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .deform import DeformField
from .render import RenderOutput, render
from .scene import GaussianSet, sh_from_rgb

HIGHLIGHT_COLOR = (1.0, 0.85, 0.1)
HIDE_OTHERS_OPACITY = 0.05


@dataclass
class Edit:
    segment_id: int
    kind: str  # recolor | opacity_scale | affine
    rgb: Optional[tuple] = None
    factor: Optional[float] = None
    translation: Optional[tuple] = None
    scale: Optional[float] = None
    pivot: Optional[tuple] = None  # segment centroid at creation time

    def validate(self):
        if self.kind == "recolor":
            if self.rgb is None or len(self.rgb) != 3:
                raise ValueError("recolor edit needs rgb")
        elif self.kind == "opacity_scale":
            if self.factor is None or self.factor <= 0:
                raise ValueError("opacity factor must be > 0")
        elif self.kind == "affine":
            if self.scale is None or self.scale <= 0:
                raise ValueError("affine scale must be > 0")
            if self.translation is None or self.pivot is None:
                raise ValueError("affine edit needs translation and pivot")
        else:
            raise ValueError(f"unknown edit kind {self.kind!r}")


@dataclass
class Segment:
    segment_id: int
    name: str
    ids: np.ndarray  # canonical Gaussian ids
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.size == 0:
            raise ValueError("segment must be nonempty")


@dataclass
class SegmentGroup:
    group_id: int
    member_ids: list[int]  # segment ids


class SegmentRegistry:
    """Mutable store of segments, groups, and edits with snapshot isolation.

    Mutations bump `revision` under a lock; `snapshot()` returns immutable
    copies so concurrent renders never observe partial edits.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.revision = 0
        self.segments: dict[int, Segment] = {}
        self.groups: dict[int, SegmentGroup] = {}
        self.edits: list[Edit] = []
        self._next_id = 1

    def add_segment(self, name: str, ids, provenance=None) -> Segment:
        with self._lock:
            seg = Segment(self._next_id, name, np.asarray(ids), provenance or {})
            self.segments[seg.segment_id] = seg
            self._next_id += 1
            self.revision += 1
            return seg

    def delete_segment(self, segment_id: int):
        with self._lock:
            if segment_id not in self.segments:
                raise KeyError(f"unknown segment {segment_id}")
            del self.segments[segment_id]
            self.edits = [e for e in self.edits if e.segment_id != segment_id]
            for group in list(self.groups.values()):
                if segment_id in group.member_ids:
                    group.member_ids.remove(segment_id)
                    if not group.member_ids:
                        del self.groups[group.group_id]
            self.revision += 1

    def add_group(self, member_ids: list[int]) -> SegmentGroup:
        with self._lock:
            for sid in member_ids:
                if sid not in self.segments:
                    raise KeyError(f"unknown segment {sid}")
            group = SegmentGroup(self._next_id, list(member_ids))
            self.groups[group.group_id] = group
            self._next_id += 1
            self.revision += 1
            return group

    def add_edit(self, edit: Edit):
        edit.validate()
        with self._lock:
            if edit.segment_id not in self.segments and edit.segment_id not in self.groups:
                raise KeyError(f"unknown segment {edit.segment_id}")
            self.edits.append(edit)
            self.revision += 1

    def bump(self):
        """Revision tick for state changes tracked outside the registry."""
        with self._lock:
            self.revision += 1

    def snapshot(self) -> "RegistrySnapshot":
        with self._lock:
            return RegistrySnapshot(
                revision=self.revision,
                segments=dict(self.segments),
                groups=dict(self.groups),
                edits=list(self.edits),
            )

    def member_gaussian_ids(self, segment_or_group_id: int) -> np.ndarray:
        with self._lock:
            return _members_locked(self.segments, self.groups, segment_or_group_id)

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "next_id": self._next_id,
                "segments": [
                    {**asdict(s), "ids": s.ids.tolist()} for s in self.segments.values()
                ],
                "groups": [asdict(g) for g in self.groups.values()],
                "edits": [asdict(e) for e in self.edits],
            }

    @staticmethod
    def from_dict(d: dict) -> "SegmentRegistry":
        reg = SegmentRegistry()
        reg._next_id = int(d.get("next_id", 1))
        for s in d.get("segments", []):
            seg = Segment(s["segment_id"], s["name"], np.asarray(s["ids"]), s.get("provenance", {}))
            reg.segments[seg.segment_id] = seg
        for g in d.get("groups", []):
            reg.groups[g["group_id"]] = SegmentGroup(g["group_id"], list(g["member_ids"]))
        for e in d.get("edits", []):
            edit = Edit(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in e.items()})
            reg.edits.append(edit)
        return reg

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @staticmethod
    def load(path) -> "SegmentRegistry":
        return SegmentRegistry.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class RegistrySnapshot:
    revision: int
    segments: dict[int, Segment]
    groups: dict[int, SegmentGroup]
    edits: list[Edit]

    def member_gaussian_ids(self, segment_or_group_id: int) -> np.ndarray:
        return _members_locked(self.segments, self.groups, segment_or_group_id)


def _members_locked(segments, groups, sid: int) -> np.ndarray:
    if sid in segments:
        return segments[sid].ids.copy()
    if sid in groups:
        parts = [segments[m].ids for m in groups[sid].member_ids if m in segments]
        if not parts:
            raise KeyError(f"group {sid} has no surviving members")
        return np.unique(np.concatenate(parts))
    raise KeyError(f"unknown segment or group {sid}")


def _membership_mask(gaussians: GaussianSet, ids: np.ndarray) -> torch.Tensor:
    wanted = torch.from_numpy(np.asarray(ids, dtype=np.int64))
    return torch.isin(gaussians.ids, wanted)


def apply_edits(deformed: GaussianSet, edits: list[Edit], snapshot: RegistrySnapshot) -> GaussianSet:
    """Replay edits (in order) on a deformed set; non-members untouched.

    recolor: DC-only SH reproducing the target color (view dependence dropped);
    opacity_scale: multiply activated opacity, clamp to (0, 0.999), re-logit;
    affine: x -> pivot + s * (x - pivot) + translation, log-scales += ln(s).
    """
    if not edits:
        return deformed
    out = deformed
    sh = out.sh
    means = out.means
    log_scales = out.log_scales
    opacity = out.opacity_logits
    for edit in edits:
        member = _membership_mask(out, snapshot.member_gaussian_ids(edit.segment_id))
        if edit.kind == "recolor":
            rgb = torch.tensor(edit.rgb, dtype=out.dtype)
            new = sh_from_rgb(rgb.expand(int(member.sum()), 3), out.sh_degree)
            sh = sh.clone()
            sh[member] = new
        elif edit.kind == "opacity_scale":
            if edit.factor == 1.0:
                continue  # identity edits must leave attributes bit-identical
            o = torch.sigmoid(opacity[member]) * edit.factor
            o = o.clamp(1e-6, 0.999)
            opacity = opacity.clone()
            opacity[member] = torch.log(o / (1.0 - o))
        elif edit.kind == "affine":
            if edit.scale == 1.0 and not any(edit.translation):
                continue
            shift = torch.tensor(edit.translation, dtype=out.dtype)
            means = means.clone()
            if edit.scale == 1.0:
                # Pure translation: skip the pivot round trip so member means
                # differ from the unedited deformation by exactly the shift.
                means[member] = means[member] + shift
            else:
                pivot = torch.tensor(edit.pivot, dtype=out.dtype)
                means[member] = pivot + edit.scale * (means[member] - pivot) + shift
                log_scales = log_scales.clone()
                log_scales[member] = log_scales[member] + math.log(edit.scale)
        out = out.with_(sh=sh, means=means, log_scales=log_scales, opacity_logits=opacity)
    return out


def track_render(
    gaussians: GaussianSet,
    field: Optional[DeformField],
    snapshot: RegistrySnapshot,
    target_id: int,
    t: float,
    camera,
    mode: str = "isolate",
    with_contrib: bool = False,
) -> RenderOutput:
    """Render one segment (or group) at time t.

    isolate: only member Gaussians; hide-others: full scene with non-members
    ghosted to 5% opacity; highlight: full scene with members tinted.
    """
    member_ids = snapshot.member_gaussian_ids(target_id)
    deformed = field.deform(gaussians, t) if field is not None else gaussians
    deformed = apply_edits(deformed, snapshot.edits, snapshot)
    member = _membership_mask(deformed, member_ids)

    with torch.no_grad():
        if mode == "isolate":
            return render(deformed.select(member), camera, with_contrib=with_contrib)
        if mode == "hide-others":
            logits = deformed.opacity_logits.clone()
            o = torch.sigmoid(logits[~member]) * HIDE_OTHERS_OPACITY
            logits[~member] = torch.log(o.clamp(1e-6, 0.999) / (1.0 - o.clamp(1e-6, 0.999)))
            return render(deformed.with_(opacity_logits=logits), camera, with_contrib=with_contrib)
        if mode == "highlight":
            sh = deformed.sh.clone()
            tint = sh_from_rgb(
                torch.tensor(HIGHLIGHT_COLOR, dtype=deformed.dtype).expand(int(member.sum()), 3),
                deformed.sh_degree,
            )
            sh[member] = 0.5 * sh[member] + 0.5 * tint
            return render(deformed.with_(sh=sh), camera, with_contrib=with_contrib)
    raise ValueError(f"unknown track mode {mode!r}")


def scene_render(
    gaussians: GaussianSet,
    field: Optional[DeformField],
    snapshot: Optional[RegistrySnapshot],
    t: float,
    camera,
    mode: str = "full",
    target_id: Optional[int] = None,
    with_contrib: bool = False,
) -> RenderOutput:
    """Full-scene render with edits applied; dispatches to track modes when asked."""
    if mode != "full":
        if target_id is None:
            raise ValueError("segment render modes need a target segment id")
        return track_render(gaussians, field, snapshot, target_id, t, camera, mode, with_contrib)
    deformed = field.deform(gaussians, t) if field is not None else gaussians
    if snapshot is not None:
        deformed = apply_edits(deformed, snapshot.edits, snapshot)
    with torch.no_grad():
        return render(deformed, camera, with_contrib=with_contrib)


def velocity_colormap(gaussians: GaussianSet, field: DeformField, t: float, dt: float = 0.02) -> torch.Tensor:
    """(N, 3) payload colorizing the x deformation velocity.

    Red for positive, green for negative, brightness scaled by magnitude
    (normalized by the scene's max at this t).
    """
    with torch.no_grad():
        lo = field.deformation(gaussians.means, max(t - dt / 2, 0.0)).dmean
        hi = field.deformation(gaussians.means, min(t + dt / 2, 1.0)).dmean
        vx = (hi[:, 0] - lo[:, 0]) / dt
        mag = vx.abs()
        peak = float(mag.max())
        bright = mag / peak if peak > 0 else mag
        payload = torch.zeros(gaussians.count, 3, dtype=gaussians.dtype)
        payload[:, 0] = torch.where(vx >= 0, bright, torch.zeros_like(bright))
        payload[:, 1] = torch.where(vx < 0, bright, torch.zeros_like(bright))
    return payload
