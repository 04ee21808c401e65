"""Fine segmentation: 2D mask ingestion, scale-conditioned affinity field, click queries.

Masks arrive per view from a provider (a directory of PNG label maps with a
JSON index, or any callable with the same contract). The affinity field is a
small MLP mapping (positional-encoded mean, mask scale) to a unit feature;
it is trained per view with a sampled-pair contrastive loss on features
rendered through the same blend weights as color rendering.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from PIL import Image
from torch import nn

from .losses import contrastive_loss, cosine_similarity, mask_iou
from .optim import Adam
from .render import Contributions, render
from .scene import Camera, GaussianSet


class MaskIngestError(RuntimeError):
    pass


@dataclass
class AffinityConfig:
    feature_dim: int = 16
    hidden: int = 128
    layers: int = 3
    pe_octaves: int = 4
    iters: int = 5000
    batch_pixels: int = 8192
    n_pairs: int = 4096
    lr: float = 1e-3
    nms_iou: float = 0.7
    weight_min: float = 0.05  # accumulated blend weight for mask membership
    tau: float = 0.75

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Mask2D:
    mask: np.ndarray  # (H, W) bool
    confidence: float
    scale: float = 0.0  # 3D scale in scene units, filled by ingest


@dataclass
class ViewMasks:
    view_id: str
    camera: Camera
    masks: list[Mask2D]


@dataclass
class MaskSet:
    views: list[ViewMasks]
    t: float
    coarse_label: int


# Provider contract: (view_id, rendered rgb image (H, W, 3) float) -> list[(mask, confidence)].
MaskProvider = Callable[[str, np.ndarray], list[tuple[np.ndarray, float]]]


def mask_nms(masks: list[np.ndarray], confidences: list[float], iou_threshold: float) -> list[int]:
    """Greedy NMS by descending confidence (ties by index); returns kept indices."""
    order = sorted(range(len(masks)), key=lambda i: (-confidences[i], i))
    kept: list[int] = []
    for i in order:
        a = torch.from_numpy(np.ascontiguousarray(masks[i]))
        if all(mask_iou(a, torch.from_numpy(np.ascontiguousarray(masks[j]))) <= iou_threshold for j in kept):
            kept.append(i)
    return sorted(kept)


def estimate_mask_scale(
    mask: np.ndarray, contrib: Contributions, means: torch.Tensor, weight_min: float = 0.05
) -> float:
    """3D scale of a 2D mask: sqrt(mean per-axis variance) of member Gaussian means.

    Members are Gaussians whose blend weight accumulated over the mask's pixels
    exceeds `weight_min`; fewer than two members yield scale 0.
    """
    weights = contrib.weight_sum_per_row(means.shape[0], torch.from_numpy(np.ascontiguousarray(mask)))
    member = weights > weight_min
    if int(member.sum()) < 2:
        return 0.0
    pts = means[member].to(torch.float64)
    return float(torch.sqrt(pts.var(dim=0, unbiased=False).mean()))


class DirectoryMaskProvider:
    """Masks from `index.json` + per-view PNG files (nonzero pixels = inside)."""

    def __init__(self, root):
        self.root = Path(root)
        with open(self.root / "index.json") as fh:
            index = json.load(fh)
        self.views: dict[str, list[dict]] = {str(v["view"]): v["masks"] for v in index["views"]}

    def __call__(self, view_id: str, image: np.ndarray) -> list[tuple[np.ndarray, float]]:
        out = []
        for entry in self.views.get(str(view_id), []):
            mask = np.asarray(Image.open(self.root / entry["file"])) > 0
            out.append((mask, float(entry.get("confidence", 1.0))))
        return out


def write_masks_dir(root, per_view: dict[str, list[tuple[np.ndarray, float]]]):
    """Materialize provider output as the directory contract (index.json + PNGs)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = {"views": []}
    for view_id, masks in per_view.items():
        view_dir = root / f"view_{view_id}"
        view_dir.mkdir(exist_ok=True)
        entries = []
        for m, (mask, conf) in enumerate(masks):
            rel = f"view_{view_id}/mask_{m:03d}.png"
            Image.fromarray((mask.astype(np.uint8)) * 255).save(root / rel)
            entries.append({"file": rel, "confidence": conf})
        index["views"].append({"view": view_id, "masks": entries})
    with open(root / "index.json", "w") as fh:
        json.dump(index, fh, indent=1)


def ingest_masks(
    provider: MaskProvider,
    members: GaussianSet,
    views: list[tuple[str, Camera]],
    t: float,
    coarse_label: int,
    deform=None,
    nms_iou: float = 0.7,
    weight_min: float = 0.05,
) -> MaskSet:
    """Render the coarse segment per view, collect provider masks, NMS, estimate scales.

    `members` is the coarse segment's Gaussians; `deform` (optional) maps them
    to timestep t. Views where the provider fails are skipped with a warning;
    all views failing or yielding zero masks is an error.
    """
    deformed = deform.deform(members, t) if deform is not None else members
    out_views: list[ViewMasks] = []
    failures = 0
    with torch.no_grad():
        for view_id, camera in views:
            rout = render(deformed, camera, with_contrib=True)
            image = rout.image.cpu().numpy()
            try:
                raw = provider(str(view_id), image)
            except Exception as exc:  # provider errors skip the view
                warnings.warn(f"mask provider failed for view {view_id}: {exc}")
                failures += 1
                continue
            if not raw:
                continue
            masks = [np.asarray(m, dtype=bool) for m, _ in raw]
            for m in masks:
                if m.shape != (camera.height, camera.width):
                    raise MaskIngestError(
                        f"mask shape {m.shape} does not match view {view_id} resolution"
                    )
            confs = [float(c) for _, c in raw]
            kept = mask_nms(masks, confs, nms_iou)
            entries = []
            for i in kept:
                scale = estimate_mask_scale(masks[i], rout.contrib, deformed.means, weight_min)
                if scale == 0.0:
                    continue  # mask does not cover this segment's Gaussians
                entries.append(Mask2D(mask=masks[i], confidence=confs[i], scale=scale))
            out_views.append(ViewMasks(view_id=str(view_id), camera=camera, masks=entries))
    if failures and not out_views:
        raise MaskIngestError("mask provider failed for every view")
    if not any(v.masks for v in out_views):
        raise MaskIngestError("no supervision: provider returned zero masks for all views")
    return MaskSet(views=out_views, t=t, coarse_label=coarse_label)


class AffinityField(nn.Module):
    """(mean, 3D mask scale) -> unit affinity feature.

    Means are normalized to the scene AABB and positional-encoded; the scale
    is concatenated both raw and positional-encoded (a bare scalar among the
    encoded position features is too weak to condition granularity). Output is
    L2-normalized so cosine similarity is well-posed.
    """

    def __init__(self, config: AffinityConfig, aabb: torch.Tensor):
        super().__init__()
        self.config = config
        self.register_buffer("aabb", aabb.clone().float())
        in_dim = 3 + 3 * 2 * config.pe_octaves + 1 + 2 * config.pe_octaves
        dims = [in_dim] + [config.hidden] * config.layers
        blocks = []
        for a, b in zip(dims[:-1], dims[1:]):
            blocks += [nn.Linear(a, b), nn.ReLU()]
        blocks.append(nn.Linear(dims[-1], config.feature_dim))
        self.net = nn.Sequential(*blocks)

    def forward(self, means: torch.Tensor, scale) -> torch.Tensor:
        dtype = self.net[-1].weight.dtype
        x = means.detach().to(dtype)
        aabb = self.aabb.to(dtype)
        u = torch.clamp((x - aabb[0]) / (aabb[1] - aabb[0]), 0.0, 1.0)
        if not torch.is_tensor(scale):
            scale = torch.full((x.shape[0], 1), float(scale), dtype=dtype)
        else:
            scale = scale.to(dtype).reshape(-1, 1).expand(x.shape[0], 1)
        feats = [u, scale]
        for k in range(self.config.pe_octaves):
            w = (2.0 ** k) * math.pi
            feats += [torch.sin(w * u), torch.cos(w * u), torch.sin(w * scale), torch.cos(w * scale)]
        out = self.net(torch.cat(feats, dim=-1))
        return out / torch.linalg.norm(out, dim=-1, keepdim=True).clamp_min(1e-8)


@dataclass
class FineSegment:
    parent_label: int
    ids: np.ndarray  # subset of the coarse parent's Gaussian ids
    scale: float
    tau: float


def train_affinity(
    mask_set: MaskSet,
    members: GaussianSet,
    config: AffinityConfig = None,
    seed: int = 0,
    log=None,
) -> AffinityField:
    """Optimize the affinity field on the deformed coarse segment `members`.

    One (view, mask) pair per iteration: pixels are labeled inside/outside the
    mask and features are rendered at that mask's 3D scale, so each mask
    supervises the granularity its scale encodes (small masks separate their
    surroundings, large masks group their contents). Blend weights per view
    are fixed by the trained scene model, so they are precomputed once and
    features re-blended each iteration; the model itself is never touched.
    """
    config = config or AffinityConfig()
    torch.manual_seed(seed)
    afield = AffinityField(config, members.aabb)
    gen = torch.Generator().manual_seed(seed)

    views = [v for v in mask_set.views if v.masks]
    weights = []
    supervision = []  # per view: list of (inside_px, outside_fg_px, scale)
    bg_px = []
    with torch.no_grad():
        for view in views:
            rout = render(members, view.camera, with_contrib=True)
            weights.append(rout.contrib.to_sparse_weights(members.count).to(torch.float32))
            covered = rout.alpha.reshape(-1) > 0.01
            bg_px.append(torch.nonzero(~covered, as_tuple=False).squeeze(-1))
            entries = []
            for m in view.masks:
                flat = torch.from_numpy(m.mask.reshape(-1))
                # Supervise only where the segment render has content: empty
                # pixels inside a mask carry no feature to pull together.
                inside = torch.nonzero(flat & covered, as_tuple=False).squeeze(-1)
                outside_fg = torch.nonzero(covered & ~flat, as_tuple=False).squeeze(-1)
                entries.append((inside, outside_fg, m.scale))
            supervision.append(entries)

    params = dict(afield.named_parameters())
    opt = Adam(params, {k: config.lr for k in params})
    deformed_means = members.means.detach()

    def draw(pool: torch.Tensor, count: int) -> torch.Tensor:
        return pool[torch.randint(pool.numel(), (count,), generator=gen)]

    for it in range(config.iters):
        vi = int(torch.randint(len(views), (1,), generator=gen))
        inside, outside_fg, scale = supervision[vi][
            int(torch.randint(len(supervision[vi]), (1,), generator=gen))
        ]
        if inside.numel() < 2:
            continue
        # Half same-mask pairs; half cross pairs against covered pixels outside
        # the mask (empty background joins as the implicit extra label).
        half = config.n_pairs // 2
        pi = [draw(inside, half)]
        pj = [draw(inside, half)]
        n_out_bg = min(max(half // 5, 1), bg_px[vi].numel())
        n_out_fg = half - n_out_bg if outside_fg.numel() else 0
        if n_out_fg:
            pi.append(draw(inside, n_out_fg))
            pj.append(draw(outside_fg, n_out_fg))
        if n_out_bg:
            pi.append(draw(inside, n_out_bg))
            pj.append(draw(bg_px[vi], n_out_bg))
        i = torch.cat(pi)
        j = torch.cat(pj)
        same = torch.zeros(i.numel(), dtype=torch.bool)
        same[:half] = True

        feats = afield(deformed_means, scale)
        rendered = torch.sparse.mm(weights[vi], feats)  # (H*W, D)
        loss = contrastive_loss(rendered[i], rendered[j], same)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite affinity loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and (it % 100 == 0 or it == config.iters - 1):
            log({"iteration": it, "loss": float(loss.detach())})
    return afield


def rendered_feature_at(
    members: GaussianSet, afield: AffinityField, camera: Camera, x: int, y: int, scale: float
) -> Optional[torch.Tensor]:
    """Blended affinity feature at a pixel of the segment-only render; None if empty."""
    with torch.no_grad():
        rout = render(members, camera, with_contrib=True)
        rows, w = rout.contrib.at(x, y)
        if rows.numel() == 0:
            return None
        feats = afield(members.means, scale)
        return (w.unsqueeze(-1).to(feats.dtype) * feats[rows]).sum(dim=0)


def segment_by_click(
    members: GaussianSet,
    afield: AffinityField,
    parent_label: int,
    camera: Camera,
    x: int,
    y: int,
    scale: float,
    tau: float,
) -> Optional[FineSegment]:
    """Gaussians of the coarse parent whose feature matches the clicked pixel's.

    `members` must already be deformed to the field's training timestep.
    """
    ref = rendered_feature_at(members, afield, camera, x, y, scale)
    if ref is None:
        return None
    with torch.no_grad():
        feats = afield(members.means, scale)
        cos = cosine_similarity(feats, ref.unsqueeze(0))
        chosen = members.ids[cos > tau].cpu().numpy()
    return FineSegment(parent_label=parent_label, ids=chosen, scale=scale, tau=tau)


def multiscale_query(afield: AffinityField, means: torch.Tensor, scales) -> torch.Tensor:
    """Features for every (scale, Gaussian) pair, shape (S, M, D)."""
    with torch.no_grad():
        return torch.stack([afield(means, float(s)) for s in scales])
