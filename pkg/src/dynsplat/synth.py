"""Analytic time-varying volumes rendered by emission-absorption ray marching.

Stands in for production DVR imagery: scenes are sums of moving Gaussian
density blobs with fixed colors, rendered front-to-back with per-pixel
ground-truth segment and blob id maps. Deterministic end to end, so datasets
regenerate bit-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Camera

BACKGROUND_ID = 0
ALPHA_BACKGROUND = 0.01  # total alpha below this marks a background pixel


@dataclass
class Blob:
    """One density blob: cubic center trajectory, cubic radius profile, fixed color.

    Density is a Gaussian falloff truncated (and shifted to zero) at
    `cutoff` radii, so silhouettes are compact.
    """

    segment_id: int
    color: tuple[float, float, float]
    center_poly: list  # (4, 3) cubic coefficients, center(t) = sum_k c[k] * t^k
    radius_poly: list  # (4,) cubic coefficients, r(t) = sum_k r[k] * t^k
    peak_density: float = 40.0
    cutoff: float = 2.5
    parent_id: int | None = None

    def center(self, t: float) -> np.ndarray:
        c = np.asarray(self.center_poly, dtype=np.float64)
        return sum(c[k] * t ** k for k in range(c.shape[0]))

    def radius(self, t: float) -> float:
        r = np.asarray(self.radius_poly, dtype=np.float64)
        return float(sum(r[k] * t ** k for k in range(r.shape[0])))


@dataclass
class AnalyticScene:
    blobs: list[Blob]
    aabb: list  # (2, 3)
    name: str = "scene"

    def to_dict(self) -> dict:
        return {"name": self.name, "aabb": self.aabb, "blobs": [asdict(b) for b in self.blobs]}

    @staticmethod
    def from_dict(d: dict) -> "AnalyticScene":
        return AnalyticScene(
            blobs=[Blob(**b) for b in d["blobs"]],
            aabb=d["aabb"],
            name=d.get("name", "scene"),
        )

    def top_level_id(self, segment_id: int) -> int:
        for b in self.blobs:
            if b.segment_id == segment_id:
                return b.parent_id if b.parent_id is not None else b.segment_id
        return segment_id


def blobs3() -> AnalyticScene:
    """The canonical fixture: three blobs, two colors, one two-lobed compound.

    A red blob drifts on the left; two blue sub-blobs (one compound parent,
    id 2) move on the right. Coarse segmentation separates the two colors;
    the sub-blobs give fine segmentation an unambiguous target.
    """
    red = (0.85, 0.18, 0.15)
    blue = (0.15, 0.25, 0.85)
    zeros = [0.0, 0.0, 0.0]
    return AnalyticScene(
        name="blobs3",
        aabb=[[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
        blobs=[
            Blob(
                segment_id=1,
                color=red,
                center_poly=[[-0.52, -0.10, 0.30], [0.26, 0.16, -0.33], zeros, zeros],
                radius_poly=[0.16, 0.02, 0.0, 0.0],
                peak_density=40.0,
            ),
            Blob(
                segment_id=3,
                parent_id=2,
                color=blue,
                center_poly=[[0.50, 0.06, 0.36], [-0.13, 0.10, -0.18], zeros, zeros],
                radius_poly=[0.13, 0.0, 0.0, 0.0],
                peak_density=40.0,
            ),
            Blob(
                segment_id=4,
                parent_id=2,
                color=blue,
                center_poly=[[0.42, -0.06, -0.32], [0.11, -0.10, 0.20], zeros, zeros],
                radius_poly=[0.13, 0.015, 0.0, 0.0],
                peak_density=40.0,
            ),
        ],
    )


def _ray_grid(camera: Camera) -> np.ndarray:
    """(H*W, 3) unit world-space ray directions through pixel centers."""
    f = camera.focal
    cx, cy = camera.principal_point
    xs = np.arange(camera.width, dtype=np.float64)
    ys = np.arange(camera.height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([(gx - cx) / f, (gy - cy) / f, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    d_world = d_cam @ camera.rotation.cpu().numpy().astype(np.float64)
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def _aabb_span(origin: np.ndarray, dirs: np.ndarray, aabb: np.ndarray, near: float, far: float):
    inv = np.where(np.abs(dirs) > 1e-12, 1.0 / dirs, np.inf)
    t_lo = (aabb[0] - origin) * inv
    t_hi = (aabb[1] - origin) * inv
    t0 = np.minimum(t_lo, t_hi).max(axis=-1)
    t1 = np.maximum(t_lo, t_hi).min(axis=-1)
    return np.maximum(t0, near), np.minimum(t1, far)


def dvr_render(
    scene: AnalyticScene, camera: Camera, t: float, step: float = None,
    shading: bool = False, with_aux: bool = False,
):
    """Emission-absorption render -> (rgb (H, W, 3), segment id map, blob id map).

    Fixed march step (default AABB diagonal / 256); segment and blob maps take
    the argmax of accumulated per-blob contributions, with BACKGROUND_ID where
    total alpha stays below 1%. with_aux additionally returns the per-blob
    contribution image (H, W, B) and residual transmittance (H, W).
    """
    aabb = np.asarray(scene.aabb, dtype=np.float64)
    if step is None:
        step = float(np.linalg.norm(aabb[1] - aabb[0])) / 256.0
    origin = camera.position.cpu().numpy().astype(np.float64)
    dirs = _ray_grid(camera)
    n_rays = dirs.shape[0]
    t0, t1 = _aabb_span(origin, dirs, aabb, camera.near, camera.far)
    span = np.maximum(t1 - t0, 0.0)
    n_steps = int(np.ceil(span.max() / step)) if span.max() > 0 else 0

    H, W = camera.height, camera.width
    n_blobs = len(scene.blobs)
    if n_blobs == 0:
        empty = (
            np.zeros((H, W, 3)),
            np.full((H, W), BACKGROUND_ID, dtype=np.int32),
            np.full((H, W), BACKGROUND_ID, dtype=np.int32),
        )
        if with_aux:
            return empty + (np.zeros((H, W, 0)), np.ones((H, W)))
        return empty

    centers = [b.center(t) for b in scene.blobs]
    radii = [max(b.radius(t), 1e-6) for b in scene.blobs]
    peaks = [b.peak_density for b in scene.blobs]
    cutoffs = [b.cutoff for b in scene.blobs]
    colors = np.asarray([b.color for b in scene.blobs], dtype=np.float64)

    rgb = np.zeros((n_rays, 3))
    contrib = np.zeros((n_rays, n_blobs))
    trans = np.ones(n_rays)

    chunk = 32
    for k0 in range(0, n_steps, chunk):
        ks = np.arange(k0, min(k0 + chunk, n_steps), dtype=np.float64)
        dist = t0[:, None] + (ks[None, :] + 0.5) * step  # (P, S)
        inside = dist < t1[:, None]
        pos = origin[None, None, :] + dirs[:, None, :] * dist[..., None]  # (P, S, 3)

        sigma_b = np.zeros((n_rays, len(ks), n_blobs))
        for bi in range(n_blobs):
            d2 = ((pos - centers[bi][None, None, :]) ** 2).sum(axis=-1)
            e = np.exp(-0.5 * d2 / (radii[bi] ** 2))
            base = math.exp(-0.5 * cutoffs[bi] ** 2)
            sigma_b[..., bi] = peaks[bi] * np.maximum(e - base, 0.0) / (1.0 - base)
        sigma_b *= inside[..., None]
        sigma = sigma_b.sum(axis=-1)  # (P, S)

        safe = np.maximum(sigma, 1e-30)
        color = (sigma_b[..., None] * colors[None, None, :, :]).sum(axis=2) / safe[..., None]
        if shading:
            grad = np.zeros_like(pos)
            for bi in range(n_blobs):
                base = math.exp(-0.5 * cutoffs[bi] ** 2)
                live = sigma_b[..., bi] > 0
                core = sigma_b[..., bi] + peaks[bi] * base / (1.0 - base)  # un-shifted falloff
                grad += (live * core)[..., None] * (centers[bi][None, None, :] - pos) / (radii[bi] ** 2)
            gnorm = np.linalg.norm(grad, axis=-1)
            ghat = grad / np.maximum(gnorm, 1e-12)[..., None]
            lambert = np.abs((ghat * dirs[:, None, :]).sum(axis=-1))
            color = color * np.where(gnorm > 1e-9, 0.3 + 0.7 * lambert, 1.0)[..., None]

        alpha = 1.0 - np.exp(-sigma * step)  # (P, S)
        # T within the chunk via the exponential form of the cumulative product.
        cum = np.cumsum(sigma, axis=1)
        T_in = trans[:, None] * np.exp(-(cum - sigma) * step)
        w = T_in * alpha
        rgb += (w[..., None] * color).sum(axis=1)
        contrib += (w[..., None] * (sigma_b / safe[..., None])).sum(axis=1)
        trans = trans * np.exp(-cum[:, -1] * step)

    total = contrib.sum(axis=-1)
    blob_ids = np.asarray([b.segment_id for b in scene.blobs])
    leaf = blob_ids[contrib.argmax(axis=-1)]
    leaf[total < ALPHA_BACKGROUND] = BACKGROUND_ID

    groups = sorted({scene.top_level_id(b.segment_id) for b in scene.blobs})
    grouped = np.zeros((n_rays, len(groups)))
    for gi, gid in enumerate(groups):
        for bi, b in enumerate(scene.blobs):
            if scene.top_level_id(b.segment_id) == gid:
                grouped[:, gi] += contrib[:, bi]
    seg = np.asarray(groups)[grouped.argmax(axis=-1)]
    seg[total < ALPHA_BACKGROUND] = BACKGROUND_ID

    result = (
        np.clip(rgb, 0.0, 1.0).reshape(H, W, 3),
        seg.reshape(H, W).astype(np.int32),
        leaf.reshape(H, W).astype(np.int32),
    )
    if with_aux:
        return result + (contrib.reshape(H, W, n_blobs), trans.reshape(H, W))
    return result


def fibonacci_cameras(
    n: int, radius: float, center=(0.0, 0.0, 0.0), fov_y: float = 0.75,
    width: int = 64, height: int = 64, near: float = 0.05, far: float = 100.0,
    name_prefix: str = "train",
) -> list[Camera]:
    """Cameras on a spherical Fibonacci point set, all looking at `center`."""
    from .coarse import fibonacci_sphere

    pts = fibonacci_sphere(n).numpy()
    center = np.asarray(center, dtype=np.float64)
    return [
        Camera.look_at(center + radius * p, center, fov_y, width, height, near, far,
                       name=f"{name_prefix}_{i}")
        for i, p in enumerate(pts)
    ]


def spiral_test_cameras(
    n: int = 181, radius: float = 2.6, center=(0.0, 0.0, 0.0), turns: float = 2.0,
    elevation_band=(-0.9, 0.9), fov_y: float = 0.75, width: int = 64, height: int = 64,
    near: float = 0.05, far: float = 100.0,
) -> list[Camera]:
    """Spiral path with elevation sweeping the band and azimuth sweeping turns * 2pi."""
    if n < 2:
        raise ValueError("spiral needs at least 2 cameras")
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for i in range(n):
        f = i / (n - 1)
        elev = elevation_band[0] + f * (elevation_band[1] - elevation_band[0])
        azim = f * turns * 2.0 * math.pi
        pos = center + radius * np.asarray(
            [math.cos(elev) * math.cos(azim), math.cos(elev) * math.sin(azim), math.sin(elev)]
        )
        cams.append(Camera.look_at(pos, center, fov_y, width, height, near, far, name=f"test_{i}"))
    return cams


def _save_png(path: Path, array: np.ndarray):
    Image.fromarray(array).save(path)


def _camera_dict(cam: Camera) -> dict:
    return {
        "name": cam.name,
        "position": cam.position.cpu().numpy().tolist(),
        "rotation": cam.rotation.cpu().numpy().tolist(),
        "fov_y": cam.fov_y,
        "width": cam.width,
        "height": cam.height,
        "near": cam.near,
        "far": cam.far,
    }


def write_dataset(
    scene: AnalyticScene,
    out_dir,
    n_views: int = 20,
    n_test_views: int = 10,
    n_timesteps: int = 5,
    width: int = 64,
    height: int = 64,
    radius: float = 2.6,
    fov_y: float = 0.75,
    seed: int = 0,
    shading: bool = False,
) -> dict:
    """Render and write the multi-view multi-timestep corpus; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = fibonacci_cameras(n_views, radius, fov_y=fov_y, width=width, height=height)
    test = spiral_test_cameras(n_test_views, radius, fov_y=fov_y, width=width, height=height)
    timesteps = [i / (n_timesteps - 1) if n_timesteps > 1 else 0.0 for i in range(n_timesteps)]

    def emit(cameras, img_tpl, mask_tpl, blob_tpl):
        for v, cam in enumerate(cameras):
            for ti, t in enumerate(timesteps):
                rgb, seg, blob = dvr_render(scene, cam, t, shading=shading)
                _save_png(out / img_tpl.format(v=v, t=ti), (rgb * 255.0 + 0.5).astype(np.uint8))
                _save_png(out / mask_tpl.format(v=v, t=ti), seg.astype(np.uint8))
                _save_png(out / blob_tpl.format(v=v, t=ti), blob.astype(np.uint8))

    emit(train, "img_v{v:03d}_t{t:03d}.png", "mask_v{v:03d}_t{t:03d}.png", "blob_v{v:03d}_t{t:03d}.png")
    emit(test, "test_v{v:03d}_t{t:03d}.png", "testmask_v{v:03d}_t{t:03d}.png", "testblob_v{v:03d}_t{t:03d}.png")

    # Unoccluded per-segment silhouettes on test views: the reference for
    # isolated-segment renders (occlusion-free by construction).
    groups: dict[int, list] = {}
    for b in scene.blobs:
        groups.setdefault(scene.top_level_id(b.segment_id), []).append(b)
        if b.parent_id is not None:
            groups.setdefault(b.segment_id, []).append(b)
    for sid, blobs in sorted(groups.items()):
        solo = AnalyticScene(blobs=blobs, aabb=scene.aabb, name=f"solo_{sid}")
        for v, cam in enumerate(test):
            for ti, t in enumerate(timesteps):
                _, seg, _ = dvr_render(solo, cam, t, shading=shading)
                _save_png(
                    out / f"testsolo_v{v:03d}_t{ti:03d}_s{sid:03d}.png",
                    (seg != BACKGROUND_ID).astype(np.uint8) * 255,
                )

    manifest = {
        "scene": scene.to_dict(),
        "seed": seed,
        "aabb": scene.aabb,
        "timesteps": timesteps,
        "width": width,
        "height": height,
        "train_cameras": [_camera_dict(c) for c in train],
        "test_cameras": [_camera_dict(c) for c in test],
        "files": {
            "train_image": "img_v{v:03d}_t{t:03d}.png",
            "train_mask": "mask_v{v:03d}_t{t:03d}.png",
            "train_blob": "blob_v{v:03d}_t{t:03d}.png",
            "test_image": "test_v{v:03d}_t{t:03d}.png",
            "test_mask": "testmask_v{v:03d}_t{t:03d}.png",
            "test_blob": "testblob_v{v:03d}_t{t:03d}.png",
            "test_solo": "testsolo_v{v:03d}_t{t:03d}_s{s:03d}.png",
        },
        "blobs": [
            {"segment_id": b.segment_id, "parent_id": b.parent_id, "color": list(b.color)}
            for b in scene.blobs
        ],
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest
