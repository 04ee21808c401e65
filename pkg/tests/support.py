"""Shared test helpers: gradient-check scenes and the finite-difference oracle.

Central finite differences are only meaningful away from the renderer's
discrete thresholds (the 1/255 alpha skip, the 3-sigma footprint, the 1e-4
transmittance cutoff, the 0.99 alpha clamp, and depth-order ties). Scene
generation therefore rejects candidate scenes whose (pixel, splat) pairs sit
within a safety margin of any threshold and re-draws deterministically.
"""

import math

import torch

from dynsplat.render import ALPHA_CLAMP, ALPHA_SKIP, LOWPASS
from dynsplat.scene import Camera, GaussianSet, covariance

GRAD_CAMERA = dict(position=(0.2, -2.6, 0.5), target=(0.0, 0.0, 0.0), fov_y=0.8)


def gradcheck_camera(width=16, height=16, dtype=torch.float64) -> Camera:
    return Camera.look_at(
        GRAD_CAMERA["position"], GRAD_CAMERA["target"], GRAD_CAMERA["fov_y"],
        width, height, dtype=dtype,
    )


def _draw_scene(seed: int, n: int, dtype=torch.float64) -> GaussianSet:
    g = torch.Generator().manual_seed(seed)
    means = (torch.rand(n, 3, generator=g, dtype=dtype) - 0.5) * 1.0
    rot = torch.randn(n, 4, generator=g, dtype=dtype)
    log_scales = -1.6 + 0.25 * torch.randn(n, 3, generator=g, dtype=dtype)
    sh = 0.3 * torch.randn(n, 3, 9, generator=g, dtype=dtype)
    # sigmoid keeps activated opacity in roughly (0.1, 0.3): no 0.99 clamps,
    # and the 3-sigma ring lies below the alpha-skip level (o * e^-4.5 < 1/255).
    opacity_logits = -1.5 + 0.3 * torch.randn(n, generator=g, dtype=dtype)
    ids = torch.arange(n)
    aabb = torch.tensor([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]], dtype=dtype)
    return GaussianSet(means, rot, log_scales, sh, opacity_logits, ids, aabb)


def boundary_margins(gaussians: GaussianSet, camera: Camera) -> dict:
    """Distances of every candidate (pixel, splat) pair to the renderer's thresholds."""
    cam_pts = camera.world_to_cam(gaussians.means)
    z = cam_pts[:, 2]
    f = camera.focal
    cx, cy = camera.principal_point
    u = f * cam_pts[:, 0] / z + cx
    v = f * cam_pts[:, 1] / z + cy

    jrow0 = torch.stack([f / z, torch.zeros_like(z), -f * cam_pts[:, 0] / (z * z)], dim=-1)
    jrow1 = torch.stack([torch.zeros_like(z), f / z, -f * cam_pts[:, 1] / (z * z)], dim=-1)
    J = torch.stack([jrow0, jrow1], dim=-2)
    cov3d = covariance(gaussians.rotations, gaussians.scales())
    JW = J @ camera.rotation.to(gaussians.dtype)
    cov2d = JW @ cov3d @ JW.transpose(-1, -2) + LOWPASS * torch.eye(2, dtype=gaussians.dtype)
    conic = torch.linalg.inv(cov2d)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + torch.sqrt(torch.clamp(mid * mid - (a * c - b * b), min=0.0))

    ys = torch.arange(camera.height, dtype=gaussians.dtype)
    xs = torch.arange(camera.width, dtype=gaussians.dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    dx = gx.reshape(-1, 1) - u[None, :]  # (P, N)
    dy = gy.reshape(-1, 1) - v[None, :]
    dist2 = dx * dx + dy * dy
    power = -0.5 * (conic[:, 0, 0] * dx * dx + conic[:, 1, 1] * dy * dy) - conic[:, 0, 1] * dx * dy
    alpha = gaussians.opacities()[None, :] * torch.exp(power)

    near_field = dist2 <= (3.5 ** 2) * lam[None, :]
    skip_margin = torch.where(
        near_field, (alpha - ALPHA_SKIP).abs(), torch.full_like(alpha, math.inf)
    ).min()
    ring_rel = (dist2 - 9.0 * lam[None, :]).abs() / (9.0 * lam[None, :])
    ring_margin = torch.where(
        alpha >= 0.5 * ALPHA_SKIP, ring_rel, torch.full_like(ring_rel, math.inf)
    ).min()

    included = (alpha >= ALPHA_SKIP) & (dist2 <= 9.0 * lam[None, :])
    trans_floor = torch.prod(torch.where(included, 1.0 - alpha, torch.ones_like(alpha)), dim=1).min()

    zs = torch.sort(z).values
    depth_gap = (zs[1:] - zs[:-1]).abs().min() if len(zs) > 1 else torch.tensor(math.inf)
    return {
        "skip": float(skip_margin),
        "ring": float(ring_margin),
        "trans_floor": float(trans_floor),
        "alpha_max": float(alpha.max()),
        "depth_gap": float(depth_gap),
        "z_min": float(z.min()),
    }


def make_gradcheck_scene(seed: int, n: int = 6, camera: Camera = None, dtype=torch.float64) -> GaussianSet:
    """Random scene safe for central finite differences (eps = 1e-4)."""
    camera = camera or gradcheck_camera(dtype=dtype)
    for attempt in range(64):
        s = _draw_scene(seed * 1009 + attempt, n, dtype=dtype)
        if _render_margins_ok(s, camera):
            return s
    raise RuntimeError(f"no margin-safe scene found for seed {seed}")


def perturbed_field(field, seed: int, scale: float = 0.02):
    """Randomize a zero-initialized decoder so the field actually deforms."""
    g = torch.Generator().manual_seed(seed)
    final = field.decoder.net[-1]
    with torch.no_grad():
        final.weight.copy_(
            (torch.rand(final.weight.shape, generator=g, dtype=final.weight.dtype) - 0.5) * 2 * scale
        )
        final.bias.copy_(
            (torch.rand(final.bias.shape, generator=g, dtype=final.bias.dtype) - 0.5) * scale
        )
    return field


def relu_margin(field, means: torch.Tensor, t: float) -> float:
    """Smallest |pre-activation| in the decoder MLP: FD validity requires it > eps-scale."""
    with torch.no_grad():
        dtype = field.decoder.net[-1].weight.dtype
        x = field.encoder(means.detach().to(dtype), t)
        margin = float("inf")
        for layer in field.decoder.net[:-1]:
            x = layer(x)
            if isinstance(layer, torch.nn.Linear):
                margin = min(margin, float(x.abs().min()))
    return margin


def _render_margins_ok(gaussians: GaussianSet, camera: Camera) -> bool:
    m = boundary_margins(gaussians, camera)
    return (
        m["skip"] > 1e-5
        and m["ring"] > 1e-3
        and m["trans_floor"] > 10.0 * 1e-4
        and m["alpha_max"] < 0.9 * ALPHA_CLAMP
        and m["depth_gap"] > 1e-3
        and m["z_min"] > camera.near + 0.1
    )


def make_field_fixture(field_ctor, gaussians: GaussianSet, t: float, seed: int, camera: Camera = None):
    """Field whose ReLU pre-activations and deformed render stay clear of thresholds."""
    camera = camera or gradcheck_camera(dtype=gaussians.dtype)
    for attempt in range(64):
        field = perturbed_field(field_ctor(), seed * 613 + attempt)
        if relu_margin(field, gaussians.means, t) <= 1e-3:
            continue
        with torch.no_grad():
            deformed = field.deform(gaussians, t)
        if _render_margins_ok(deformed, camera):
            return field
    raise RuntimeError("no margin-safe field found")


def make_affinity_fixture(ctor, means: torch.Tensor, scale: float, seed: int):
    """Affinity field whose ReLU pre-activations stay clear of zero (FD-safe)."""
    for attempt in range(64):
        torch.manual_seed(seed * 977 + attempt)
        afield = ctor()
        with torch.no_grad():
            dtype = afield.net[-1].weight.dtype
            aabb = afield.aabb.to(dtype)
            u = torch.clamp((means.detach().to(dtype) - aabb[0]) / (aabb[1] - aabb[0]), 0, 1)
            s = torch.full((means.shape[0], 1), scale, dtype=dtype)
            import math as _math

            feats = [u, s]
            for k in range(afield.config.pe_octaves):
                w = (2.0 ** k) * _math.pi
                feats += [torch.sin(w * u), torch.cos(w * u), torch.sin(w * s), torch.cos(w * s)]
            x = torch.cat(feats, dim=-1)
            margin = float("inf")
            for layer in afield.net[:-1]:
                x = layer(x)
                if isinstance(layer, torch.nn.Linear):
                    margin = min(margin, float(x.abs().min()))
            # the output is L2-normalized; near-zero norms are also non-smooth
            out_norm = float(afield.net[-1](x).norm(dim=-1).min())
        if margin > 1e-3 and out_norm > 1e-2:
            return afield
    raise RuntimeError("no margin-safe affinity field found")


def demo_checkpoint(n_red: int = 70, n_blue: int = 50, seed: int = 0):
    """Hand-built checkpoint: gaussians sampled from the blobs3 blobs at t=0,
    zero-initialized deformation field. No training required; coarse k=2 and
    click flows behave sensibly."""
    from dynsplat.checkpoint import Checkpoint
    from dynsplat.deform import DeformField, FieldConfig
    from dynsplat.scene import sh_from_rgb
    from dynsplat.synth import blobs3

    scene = blobs3()
    gen = torch.Generator().manual_seed(seed)
    means = []
    colors = []
    counts = [n_red, n_blue, n_blue]
    for blob, count in zip(scene.blobs, counts):
        center = torch.tensor(blob.center(0.0), dtype=torch.float32)
        radius = blob.radius(0.0)
        means.append(center + torch.randn(count, 3, generator=gen) * radius * 0.6)
        colors.append(torch.tensor(blob.color, dtype=torch.float32).expand(count, 3))
    means = torch.cat(means)
    n = means.shape[0]
    rotations = torch.zeros(n, 4)
    rotations[:, 0] = 1.0
    aabb = torch.tensor(scene.aabb, dtype=torch.float32)
    gaussians = GaussianSet(
        means=means,
        rotations=rotations,
        log_scales=torch.full((n, 3), -2.5),
        sh=torch.cat([sh_from_rgb(c, 2) for c in colors]),
        opacity_logits=torch.full((n,), 1.4),
        ids=torch.arange(n),
        aabb=aabb,
    )
    field = DeformField(FieldConfig(n_grid=8, t_grid=4, rank_spatial=4, rank_temporal=2), aabb)
    return Checkpoint(gaussians=gaussians, field=field, meta={"fixture": "demo"})


def fd_gradient(loss_fn, tensor: torch.Tensor, eps: float = 1e-4, indices=None) -> dict:
    """Central finite-difference gradient of loss_fn() w.r.t. tensor entries."""
    flat = tensor.detach().reshape(-1)
    if indices is None:
        indices = range(flat.numel())
    grads = {}
    for i in indices:
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            lp = float(loss_fn().detach())
            flat[i] = orig - eps
            lm = float(loss_fn().detach())
            flat[i] = orig
        grads[i] = (lp - lm) / (2 * eps)
    return grads


def max_rel_error(analytic: torch.Tensor, fd: dict, floor: float = 1e-6) -> float:
    flat = analytic.reshape(-1)
    worst = 0.0
    for i, fd_val in fd.items():
        a = float(flat[i])
        err = abs(a - fd_val) / max(abs(a), abs(fd_val), floor)
        worst = max(worst, err)
    return worst
