"""Differentiable splatting: projection, depth-ordered alpha compositing, picking.

Compositing runs in tile-parallel numba kernels (see _kernels.py). The kernel
boundary carries camera-space means, camera-frame 3D covariances, activated
opacities, and per-Gaussian payload channels; the backward kernel walks pixels
back-to-front recomputing transmittance, and its per-entry gradients are
reduced per splat and chained analytically through the projection (including
the dependence of the local affine Jacobian on the mean). Everything upstream
of that boundary (quaternion -> covariance, sigmoid, SH color, deformation)
stays in torch autograd.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import _kernels
from ._kernels import ALPHA_CLAMP, ALPHA_SKIP, TILE, TRANSMITTANCE_MIN
from .scene import Camera, GaussianSet, covariance, rendered_color

LOWPASS = 0.3  # pixel^2 dilation of the projected covariance


@dataclass
class SplatProjection:
    """Screen-space splats for the visible subset of a set, in (id, depth) order."""

    mean2d: torch.Tensor  # (M, 2) pixel coords
    cov2d: torch.Tensor  # (M, 2, 2) after low-pass dilation
    depth: torch.Tensor  # (M,) camera-space z
    radius: torch.Tensor  # (M,) 3-sigma footprint radius, pixels
    index: torch.Tensor  # (M,) row index into the projected set


@dataclass
class Contributions:
    """Sparse per-pixel blend weights w_i = alpha_i * prod_{j<i}(1 - alpha_j).

    Entries are grouped by pixel and front-to-back within a pixel.
    """

    pixel: torch.Tensor  # (E,) flattened pixel index y*W + x
    row: torch.Tensor  # (E,) row index into the rendered set
    weight: torch.Tensor  # (E,)
    width: int
    height: int

    def at(self, x: int, y: int) -> tuple[torch.Tensor, torch.Tensor]:
        """(rows, weights) of contributors at pixel (x, y), front-to-back."""
        sel = self.pixel == (y * self.width + x)
        return self.row[sel], self.weight[sel]

    def top_row(self, x: int, y: int) -> Optional[int]:
        rows, weights = self.at(x, y)
        if rows.numel() == 0:
            return None
        return int(rows[int(torch.argmax(weights))])

    def weight_sum_per_row(self, n_rows: int, pixel_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Per-row accumulated weight, optionally restricted to a (H, W) bool mask."""
        w = self.weight
        rows = self.row
        if pixel_mask is not None:
            keep = pixel_mask.reshape(-1)[self.pixel]
            w, rows = w[keep], rows[keep]
        out = torch.zeros(n_rows, dtype=w.dtype)
        out.index_add_(0, rows, w)
        return out

    def to_sparse_weights(self, n_rows: int) -> torch.Tensor:
        """(H*W, n_rows) sparse COO matrix of blend weights (for feature blending)."""
        indices = torch.stack([self.pixel, self.row])
        return torch.sparse_coo_tensor(
            indices, self.weight, (self.width * self.height, n_rows), check_invariants=True
        ).coalesce()


@dataclass
class RenderOutput:
    image: torch.Tensor  # (H, W, C)
    alpha: torch.Tensor  # (H, W) accumulated alpha
    contrib: Optional[Contributions] = None


def project(gaussians: GaussianSet, camera: Camera) -> SplatProjection:
    """Project Gaussians to screen space; behind-near-plane Gaussians are culled."""
    dtype = gaussians.dtype
    cam_pts = camera.world_to_cam(gaussians.means)  # (N, 3)
    index = _canonical_order(gaussians.ids, cam_pts[:, 2].detach(), camera.near)
    cam_pts = cam_pts[index]

    x, y, z = cam_pts.unbind(-1)
    f = torch.as_tensor(camera.focal, dtype=dtype)
    cx, cy = camera.principal_point
    mean2d = torch.stack([f * x / z + cx, f * y / z + cy], dim=-1)

    zero = torch.zeros_like(z)
    # J = d(pixel)/d(camera point) of the perspective map, evaluated at the mean.
    jrow0 = torch.stack([f / z, zero, -f * x / (z * z)], dim=-1)
    jrow1 = torch.stack([zero, f / z, -f * y / (z * z)], dim=-1)
    J = torch.stack([jrow0, jrow1], dim=-2)  # (M, 2, 3)

    cov3d = covariance(gaussians.rotations[index], torch.exp(gaussians.log_scales[index]))
    JW = J @ camera.rotation.to(dtype)
    cov2d = JW @ cov3d @ JW.transpose(-1, -2) + LOWPASS * torch.eye(2, dtype=dtype)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = torch.sqrt(torch.clamp(mid * mid - (a * c - b * b), min=0.0))
    radius = 3.0 * torch.sqrt(mid + disc)

    return SplatProjection(mean2d=mean2d, cov2d=cov2d, depth=z, radius=radius, index=index)


def _canonical_order(ids: torch.Tensor, depth: torch.Tensor, near: float) -> torch.Tensor:
    """Rows of visible splats sorted by depth, ties broken by ascending id."""
    visible = depth > near
    index = torch.nonzero(visible, as_tuple=False).squeeze(-1)
    index = index[torch.argsort(ids[index])]
    index = index[torch.argsort(depth[index], stable=True)]
    return index


def _screen_arrays(q: np.ndarray, vc: np.ndarray, opac: np.ndarray, camera: Camera) -> dict:
    """Screen-space quantities for the kernels, plus intermediates for the backward chain."""
    f = camera.focal
    cx, cy = camera.principal_point
    iz = 1.0 / q[:, 2]
    tx = q[:, 0] * iz
    ty = q[:, 1] * iz
    k = (f * iz) ** 2
    v00, v01, v02 = vc[:, 0, 0], vc[:, 0, 1], vc[:, 0, 2]
    v11, v12, v22 = vc[:, 1, 1], vc[:, 1, 2], vc[:, 2, 2]
    A = v00 - 2.0 * tx * v02 + tx * tx * v22
    B = v01 - ty * v02 - tx * v12 + tx * ty * v22
    Cq = v11 - 2.0 * ty * v12 + ty * ty * v22
    s00 = k * A + LOWPASS
    s01 = k * B
    s11 = k * Cq + LOWPASS
    det = s00 * s11 - s01 * s01
    ok = det > 0
    det_safe = np.where(ok, det, 1.0)
    conic = np.stack([s11 / det_safe, -s01 / det_safe, s00 / det_safe], axis=-1)
    mid = 0.5 * (s00 + s11)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.where(ok, 3.0 * np.sqrt(lam), 0.0)
    # For tiling only: beyond this radius alpha stays below the skip threshold.
    with np.errstate(divide="ignore", invalid="ignore"):
        chi = 2.0 * np.log(np.maximum(opac, 1e-30) / ALPHA_SKIP)
    r_alpha = np.sqrt(np.maximum(chi, 0.0) * lam)
    return {
        "u": f * tx + cx,
        "v": f * ty + cy,
        "conic": np.ascontiguousarray(conic),
        "radius": radius,
        "r_tile": np.where(opac >= ALPHA_SKIP, np.minimum(radius, r_alpha), 0.0),
        "tx": tx,
        "ty": ty,
        "iz": iz,
        "k": k,
        "A": A,
        "B": B,
        "Cq": Cq,
    }


def _tile_csr(u, v, r_tile, width, height) -> tuple[np.ndarray, np.ndarray, int, int]:
    """CSR lists of splat indices per tile, preserving input (depth) order."""
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    n_tiles = ntx * nty
    live = (r_tile > 0) & (u + r_tile >= 0) & (u - r_tile <= width - 1) & (v + r_tile >= 0) & (v - r_tile <= height - 1)
    cand = np.nonzero(live)[0]
    if cand.size == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), ntx, nty

    r = r_tile[cand]
    tx0 = np.clip(np.floor((u[cand] - r) / TILE).astype(np.int64), 0, ntx - 1)
    tx1 = np.clip(np.floor((u[cand] + r) / TILE).astype(np.int64), 0, ntx - 1)
    ty0 = np.clip(np.floor((v[cand] - r) / TILE).astype(np.int64), 0, nty - 1)
    ty1 = np.clip(np.floor((v[cand] + r) / TILE).astype(np.int64), 0, nty - 1)
    ncols = tx1 - tx0 + 1
    counts = ncols * (ty1 - ty0 + 1)

    flat = np.repeat(np.arange(cand.size), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(flat.size) - starts[flat]
    tile_id = (ty0[flat] + local // ncols[flat]) * ntx + (tx0[flat] + local % ncols[flat])

    order = np.argsort(tile_id, kind="stable")  # stable keeps depth order per tile
    entry_splat = cand[flat[order]]
    per_tile = np.bincount(tile_id, minlength=n_tiles)
    tile_start = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(per_tile, out=tile_start[1:])
    return tile_start, entry_splat.astype(np.int64), ntx, nty


class _SplatFunction(torch.autograd.Function):
    """Kernel boundary: inputs (q, Vc, opacity, channels) -> (image, alpha)."""

    @staticmethod
    def forward(ctx, q, vc, opac, channels, scr, csr, camera):
        dtype = q.dtype
        np_dtype = np.float64 if dtype == torch.float64 else np.float32
        H, W, C = camera.height, camera.width, channels.shape[-1]
        tile_start, entry_splat, ntx, _ = csr
        image = np.zeros((H, W, C), dtype=np_dtype)
        alpha = np.zeros((H, W), dtype=np_dtype)
        arrays = tuple(
            np.ascontiguousarray(scr[name].astype(np_dtype, copy=False))
            for name in ("u", "v", "conic", "radius")
        )
        opac_np = opac.detach().numpy().astype(np_dtype, copy=False)
        chan_np = np.ascontiguousarray(channels.detach().numpy().astype(np_dtype, copy=False))
        if entry_splat.size:
            _kernels.forward_kernel(
                *arrays, opac_np, chan_np, tile_start, entry_splat, ntx, image, alpha
            )
        ctx.save_for_backward(q, vc, opac, channels)
        ctx.scr = scr
        ctx.csr = csr
        ctx.camera = camera
        ctx.kernel_arrays = (arrays, opac_np, chan_np)
        return torch.from_numpy(image).to(dtype), torch.from_numpy(alpha).to(dtype)

    @staticmethod
    def backward(ctx, g_image, g_alpha):
        q, vc, opac, channels = ctx.saved_tensors
        scr, (tile_start, entry_splat, ntx, _) = ctx.scr, ctx.csr
        camera = ctx.camera
        (u, v, conic, radius), opac_np, chan_np = ctx.kernel_arrays
        dtype = q.dtype
        np_dtype = u.dtype
        M, C = chan_np.shape
        E = entry_splat.size

        g_img_np = np.ascontiguousarray(g_image.detach().numpy().astype(np_dtype, copy=False))
        if g_alpha is None:
            g_alpha_np = np.zeros((camera.height, camera.width), dtype=np_dtype)
        else:
            g_alpha_np = np.ascontiguousarray(g_alpha.detach().numpy().astype(np_dtype, copy=False))

        ge = {name: np.zeros(E, dtype=np_dtype) for name in ("u", "v", "o")}
        ge_conic = np.zeros((E, 3), dtype=np_dtype)
        ge_chan = np.zeros((E, C), dtype=np_dtype)
        if E:
            _kernels.backward_kernel(
                u, v, conic, radius, opac_np, chan_np,
                tile_start, entry_splat, ntx,
                g_img_np, g_alpha_np,
                ge["u"], ge["v"], ge_conic, ge["o"], ge_chan,
            )

        # Reduce per-entry gradients to per-splat gradients (deterministic order).
        def reduce(values, width=None):
            shape = (M,) if width is None else (M, width)
            out = np.zeros(shape, dtype=np_dtype)
            np.add.at(out, entry_splat, values)
            return torch.from_numpy(out).to(dtype)

        g_u = reduce(ge["u"])
        g_v = reduce(ge["v"])
        g_conic = reduce(ge_conic, 3)
        g_opac = reduce(ge["o"])
        g_chan = reduce(ge_chan, C)

        # Chain through conic = inv(cov2d) and the projection (incl. dJ/dmean).
        t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(dtype)
        f = camera.focal
        tx, ty, iz, k = t(scr["tx"]), t(scr["ty"]), t(scr["iz"]), t(scr["k"])
        A, B, Cq = t(scr["A"]), t(scr["B"]), t(scr["Cq"])
        ia, ib, ic = t(conic[:, 0]), t(conic[:, 1]), t(conic[:, 2])

        conic_mat = torch.stack(
            [torch.stack([ia, ib], -1), torch.stack([ib, ic], -1)], -2
        )
        g_conic_mat = torch.stack(
            [
                torch.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                torch.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1),
            ],
            -2,
        )
        g_S = -conic_mat @ g_conic_mat @ conic_mat  # d inv(S) = -S^-1 dS S^-1
        dS00, dS11 = g_S[:, 0, 0], g_S[:, 1, 1]
        dS01s = g_S[:, 0, 1] + g_S[:, 1, 0]

        gA = k * dS00
        gB = k * dS01s
        gC = k * dS11
        gk = A * dS00 + B * dS01s + Cq * dS11

        v02, v12, v22 = vc[:, 0, 2].detach(), vc[:, 1, 2].detach(), vc[:, 2, 2].detach()
        g_vc = torch.zeros_like(vc)
        g_vc[:, 0, 0] = gA
        g_vc[:, 0, 1] = gB
        g_vc[:, 0, 2] = -2.0 * tx * gA - ty * gB
        g_vc[:, 1, 1] = gC
        g_vc[:, 1, 2] = -tx * gB - 2.0 * ty * gC
        g_vc[:, 2, 2] = tx * tx * gA + tx * ty * gB + ty * ty * gC

        g_tx = gA * (-2.0 * v02 + 2.0 * tx * v22) + gB * (-v12 + ty * v22) + f * g_u
        g_ty = gB * (-v02 + tx * v22) + gC * (-2.0 * v12 + 2.0 * ty * v22) + f * g_v
        g_iz = 2.0 * f * f * iz * gk + q[:, 0].detach() * g_tx + q[:, 1].detach() * g_ty
        g_q = torch.stack([iz * g_tx, iz * g_ty, -iz * iz * g_iz], dim=-1)

        return g_q, g_vc, g_opac, g_chan, None, None, None


def render(
    gaussians: GaussianSet,
    camera: Camera,
    payload: Optional[torch.Tensor] = None,
    with_contrib: bool = False,
) -> RenderOutput:
    """Composite per-Gaussian payload channels (default: SH-evaluated color) to an image.

    payload: (N, C) channel vector per Gaussian of the full set; SH-evaluated
    rgb when omitted. Identical payloads render identically regardless of
    channel meaning (color, affinity feature, label color).
    """
    dtype = gaussians.dtype
    H, W = camera.height, camera.width
    rot = camera.rotation.to(dtype)
    cam_pts = (gaussians.means - camera.position.to(dtype)) @ rot.T
    index = _canonical_order(gaussians.ids, cam_pts[:, 2].detach(), camera.near)

    q = cam_pts[index]
    cov3d = covariance(gaussians.rotations[index], torch.exp(gaussians.log_scales[index]))
    vc = rot @ cov3d @ rot.T  # camera-frame 3D covariance
    opac = torch.sigmoid(gaussians.opacity_logits[index])

    if payload is None:
        dirs = gaussians.means[index] - camera.position.to(dtype)
        dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True).clamp_min(1e-12)
        channels = rendered_color(gaussians.sh[index], dirs)  # (M, 3)
    else:
        channels = payload.to(dtype)[index]
        if channels.ndim == 1:
            channels = channels.unsqueeze(-1)
    C = channels.shape[-1]

    if index.numel() == 0:
        out = RenderOutput(torch.zeros(H, W, C, dtype=dtype), torch.zeros(H, W, dtype=dtype))
        if with_contrib:
            empty = torch.zeros(0, dtype=torch.long)
            out.contrib = Contributions(empty, empty, torch.zeros(0, dtype=dtype), W, H)
        return out

    scr = _screen_arrays(q.detach().numpy(), vc.detach().numpy(), opac.detach().numpy(), camera)
    csr = _tile_csr(scr["u"], scr["v"], scr["r_tile"], W, H)
    image, alpha = _SplatFunction.apply(q, vc, opac, channels, scr, csr, camera)
    out = RenderOutput(image=image, alpha=alpha)

    if with_contrib:
        tile_start, entry_splat, ntx, _ = csr
        np_dtype = scr["u"].dtype
        opac_np = opac.detach().numpy().astype(np_dtype, copy=False)
        args = (scr["u"], scr["v"], scr["conic"].astype(np_dtype), scr["radius"], opac_np,
                tile_start, entry_splat, ntx, H, W)
        n_tiles = tile_start.shape[0] - 1
        counts = np.zeros(n_tiles, dtype=np.int64)
        if entry_splat.size:
            _kernels.count_contrib_kernel(*args, counts)
        total = int(counts.sum())
        out_start = np.zeros(n_tiles, dtype=np.int64)
        np.cumsum(counts[:-1], out=out_start[1:])
        pix = np.zeros(total, dtype=np.int64)
        spl = np.zeros(total, dtype=np.int64)
        wgt = np.zeros(total, dtype=np_dtype)
        if total:
            _kernels.fill_contrib_kernel(*args, out_start, pix, spl, wgt)
        order = np.argsort(pix, kind="stable")  # group by pixel, keep front-to-back
        rows = index[torch.from_numpy(spl[order])]
        out.contrib = Contributions(
            torch.from_numpy(pix[order]), rows, torch.from_numpy(wgt[order]).to(dtype), W, H
        )
    return out


def render_backward(output: RenderOutput, grad_image: torch.Tensor, gaussians: GaussianSet, payload=None) -> dict:
    """Gradients of sum(image * grad_image) for every differentiable attribute tensor.

    The set's tensors (and payload, if given) must require grad and have been
    used by the render that produced `output`.
    """
    inputs = {
        "means": gaussians.means,
        "rotations": gaussians.rotations,
        "log_scales": gaussians.log_scales,
        "sh": gaussians.sh,
        "opacity_logits": gaussians.opacity_logits,
    }
    if payload is not None:
        inputs["payload"] = payload
    tracked = {k: v for k, v in inputs.items() if v.requires_grad}
    grads = torch.autograd.grad(
        outputs=output.image,
        inputs=list(tracked.values()),
        grad_outputs=grad_image.to(output.image.dtype),
        retain_graph=True,
        allow_unused=True,
    )
    return {
        name: (torch.zeros_like(tensor) if grad is None else grad)
        for (name, tensor), grad in zip(tracked.items(), grads)
    }


def pick(output: RenderOutput, gaussians: GaussianSet, x: int, y: int) -> Optional[int]:
    """Id of the highest-blend-weight contributor at pixel (x, y); None when empty."""
    if output.contrib is None:
        raise ValueError("render was called without with_contrib=True")
    row = output.contrib.top_row(x, y)
    if row is None:
        return None
    return int(gaussians.ids[row])
