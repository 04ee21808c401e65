"""Deformation field: factorized spatiotemporal encoder + MLP decoder.

The hybrid encoder factorizes a dense 4D feature volume into three spatial
planes, three spatial vectors, and one temporal vector; a point's feature is
assembled by bilinear/linear interpolation of those factors. A fully implicit
variant (positional encoding + larger MLP) runs behind the same interface so
both structures train under the same loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn

from .scene import GaussianSet


@dataclass
class FieldConfig:
    encoder: str = "hybrid"  # hybrid | implicit
    n_grid: int = 64
    t_grid: int = 64
    rank_spatial: int = 16
    rank_temporal: int = 8
    fusion: str = "concat"  # concat | multiply (multiply needs equal ranks)
    decoder_hidden: int = 64
    decoder_layers: int = 2
    implicit_hidden: int = 128
    implicit_layers: int = 4
    pe_spatial: int = 6
    pe_temporal: int = 4
    opacity_deform: bool = True
    aabb_dilation: float = 0.05

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Deformation:
    dmean: torch.Tensor  # (M, 3)
    drot: torch.Tensor  # (M, 4)
    dlog_scale: torch.Tensor  # (M, 3), log domain
    dopacity: torch.Tensor  # (M,), logit domain


def _lerp_vector(vec: torch.Tensor, coord: torch.Tensor) -> torch.Tensor:
    """vec (R, N) sampled at continuous grid coords (M,) -> (R, M)."""
    n = vec.shape[1]
    i0 = torch.clamp(coord.floor().long(), 0, n - 2)
    f = coord - i0
    return vec[:, i0] * (1.0 - f) + vec[:, i0 + 1] * f


def _bilerp_plane(plane: torch.Tensor, ca: torch.Tensor, cb: torch.Tensor) -> torch.Tensor:
    """plane (R, N, N) sampled at continuous grid coords (M,), (M,) -> (R, M)."""
    n = plane.shape[1]
    ia = torch.clamp(ca.floor().long(), 0, n - 2)
    ib = torch.clamp(cb.floor().long(), 0, n - 2)
    fa = ca - ia
    fb = cb - ib
    p00 = plane[:, ia, ib]
    p01 = plane[:, ia, ib + 1]
    p10 = plane[:, ia + 1, ib]
    p11 = plane[:, ia + 1, ib + 1]
    return (
        p00 * (1 - fa) * (1 - fb)
        + p01 * (1 - fa) * fb
        + p10 * fa * (1 - fb)
        + p11 * fa * fb
    )


class FactorizedEncoder(nn.Module):
    """Three planes (XY, XZ, YZ), three spatial vectors, one temporal vector."""

    def __init__(self, config: FieldConfig, aabb: torch.Tensor, time_range=(0.0, 1.0)):
        super().__init__()
        self.config = config
        n, t = config.n_grid, config.t_grid
        rs, rt = config.rank_spatial, config.rank_temporal
        if n < 2 or t < 2 or rs < 1 or rt < 1:
            raise ValueError("encoder needs n_grid, t_grid >= 2 and ranks >= 1")
        if config.fusion == "multiply" and rs != rt:
            raise ValueError("multiply fusion requires rank_spatial == rank_temporal")

        def grid(*shape):
            return nn.Parameter(torch.empty(*shape).uniform_(-0.1, 0.1))

        self.plane_xy = grid(rs, n, n)
        self.plane_xz = grid(rs, n, n)
        self.plane_yz = grid(rs, n, n)
        self.vec_x = grid(rs, n)
        self.vec_y = grid(rs, n)
        self.vec_z = grid(rs, n)
        self.vec_t = grid(rt, t)
        self.register_buffer("aabb", aabb.clone().float())
        self.register_buffer("time_range", torch.tensor(time_range, dtype=torch.float32))

    @property
    def out_dim(self) -> int:
        if self.config.fusion == "multiply":
            return self.config.rank_spatial
        return self.config.rank_spatial + self.config.rank_temporal

    def param_count(self) -> int:
        n, t = self.config.n_grid, self.config.t_grid
        rs, rt = self.config.rank_spatial, self.config.rank_temporal
        return 3 * n * n * rs + 3 * n * rs + t * rt

    def normalize(self, x: torch.Tensor, t: float) -> tuple[torch.Tensor, torch.Tensor]:
        aabb = self.aabb.to(x.dtype)
        uvw = (x - aabb[0]) / (aabb[1] - aabb[0])
        uvw = torch.clamp(uvw, 0.0, 1.0)
        t0, t1 = float(self.time_range[0]), float(self.time_range[1])
        tau = min(max((t - t0) / (t1 - t0), 0.0), 1.0)
        return uvw, torch.tensor(tau, dtype=x.dtype)

    def forward(self, x: torch.Tensor, t: float) -> torch.Tensor:
        """Means (M, 3) at timestep t -> features (M, out_dim)."""
        uvw, tau = self.normalize(x, t)
        n, tg = self.config.n_grid, self.config.t_grid
        cu = uvw[:, 0] * (n - 1)
        cv = uvw[:, 1] * (n - 1)
        cw = uvw[:, 2] * (n - 1)
        spatial = (
            _bilerp_plane(self.plane_xy.to(x.dtype), cu, cv) * _lerp_vector(self.vec_z.to(x.dtype), cw)
            + _bilerp_plane(self.plane_xz.to(x.dtype), cu, cw) * _lerp_vector(self.vec_y.to(x.dtype), cv)
            + _bilerp_plane(self.plane_yz.to(x.dtype), cv, cw) * _lerp_vector(self.vec_x.to(x.dtype), cu)
        )  # (R_s, M)
        ct = (tau * (tg - 1)).expand(x.shape[0])
        temporal = _lerp_vector(self.vec_t.to(x.dtype), ct)  # (R_t, M)
        if self.config.fusion == "multiply":
            return (spatial * temporal).T
        return torch.cat([spatial, temporal], dim=0).T

    def tv_loss(self) -> torch.Tensor:
        """Squared adjacent differences over every vector and both plane axes."""
        total = 0.0
        for vec in (self.vec_x, self.vec_y, self.vec_z, self.vec_t):
            total = total + (vec[:, 1:] - vec[:, :-1]).square().sum()
        for plane in (self.plane_xy, self.plane_xz, self.plane_yz):
            total = total + (plane[:, 1:, :] - plane[:, :-1, :]).square().sum()
            total = total + (plane[:, :, 1:] - plane[:, :, :-1]).square().sum()
        return total

    def tv_term_count(self) -> int:
        """Number of squared-difference terms in tv_loss."""
        n, t = self.config.n_grid, self.config.t_grid
        rs, rt = self.config.rank_spatial, self.config.rank_temporal
        return 3 * rs * (n - 1) + rt * (t - 1) + 3 * rs * 2 * n * (n - 1)

    def dense_tensor(self, tau_index: int) -> torch.Tensor:
        """Dense (N, N, N, R_s + R_t or R_s) evaluation at a temporal grid node.

        Oracle counterpart of forward(): the factor sum expanded without
        interpolation; forward() must match it exactly at grid nodes.
        """
        mxy, mxz, myz = self.plane_xy, self.plane_xz, self.plane_yz
        vx, vy, vz, vt = self.vec_x, self.vec_y, self.vec_z, self.vec_t
        dense = (
            torch.einsum("rij,rk->rijk", mxy, vz)
            + torch.einsum("rik,rj->rijk", mxz, vy)
            + torch.einsum("rjk,ri->rijk", myz, vx)
        )  # (R_s, N, N, N) indexed (x, y, z)
        spatial = dense.permute(1, 2, 3, 0)
        temporal = vt[:, tau_index].reshape(1, 1, 1, -1).expand(*spatial.shape[:3], -1)
        if self.config.fusion == "multiply":
            return spatial * temporal
        return torch.cat([spatial, temporal], dim=-1)


class ImplicitEncoder(nn.Module):
    """Positional encoding of (x, y, z, t); pairs with a larger decoder MLP."""

    def __init__(self, config: FieldConfig, aabb: torch.Tensor, time_range=(0.0, 1.0)):
        super().__init__()
        self.config = config
        self.register_buffer("aabb", aabb.clone().float())
        self.register_buffer("time_range", torch.tensor(time_range, dtype=torch.float32))

    @property
    def out_dim(self) -> int:
        return 3 + 3 * 2 * self.config.pe_spatial + 1 + 2 * self.config.pe_temporal

    def tv_loss(self) -> torch.Tensor:
        return torch.zeros(())

    def tv_term_count(self) -> int:
        return 0

    def forward(self, x: torch.Tensor, t: float) -> torch.Tensor:
        aabb = self.aabb.to(x.dtype)
        uvw = torch.clamp((x - aabb[0]) / (aabb[1] - aabb[0]), 0.0, 1.0)
        t0, t1 = float(self.time_range[0]), float(self.time_range[1])
        tau = min(max((t - t0) / (t1 - t0), 0.0), 1.0)
        tau = torch.full((x.shape[0], 1), tau, dtype=x.dtype)
        feats = [uvw, tau]
        for k in range(self.config.pe_spatial):
            feats += [torch.sin((2.0 ** k) * math.pi * uvw), torch.cos((2.0 ** k) * math.pi * uvw)]
        for k in range(self.config.pe_temporal):
            feats += [torch.sin((2.0 ** k) * math.pi * tau), torch.cos((2.0 ** k) * math.pi * tau)]
        return torch.cat(feats, dim=-1)


class DeformDecoder(nn.Module):
    """MLP mapping encoded features to (dmean, drot, dlog_scale, dopacity).

    The final layer is zero-initialized so an untrained field is the identity.
    """

    OUT_DIM = 11

    def __init__(self, in_dim: int, hidden: int, layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * layers
        blocks = []
        for a, b in zip(dims[:-1], dims[1:]):
            blocks += [nn.Linear(a, b), nn.ReLU()]
        final = nn.Linear(dims[-1], self.OUT_DIM)
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        self.net = nn.Sequential(*blocks, final)

    def forward(self, features: torch.Tensor) -> Deformation:
        out = self.net(features)
        return Deformation(
            dmean=out[:, 0:3],
            drot=out[:, 3:7],
            dlog_scale=out[:, 7:10],
            dopacity=out[:, 10],
        )


class DeformField(nn.Module):
    """Encoder + decoder; produces per-Gaussian attribute deltas and applies them."""

    def __init__(self, config: FieldConfig, scene_aabb: torch.Tensor, time_range=(0.0, 1.0)):
        super().__init__()
        self.config = config
        extent = scene_aabb[1] - scene_aabb[0]
        pad = 0.5 * config.aabb_dilation * extent
        aabb = torch.stack([scene_aabb[0] - pad, scene_aabb[1] + pad])
        if config.encoder == "hybrid":
            self.encoder = FactorizedEncoder(config, aabb, time_range)
            self.decoder = DeformDecoder(self.encoder.out_dim, config.decoder_hidden, config.decoder_layers)
        elif config.encoder == "implicit":
            self.encoder = ImplicitEncoder(config, aabb, time_range)
            self.decoder = DeformDecoder(self.encoder.out_dim, config.implicit_hidden, config.implicit_layers)
        else:
            raise ValueError(f"unknown encoder kind {config.encoder!r}")

    def deformation(self, means: torch.Tensor, t: float) -> Deformation:
        # Means enter the encoder detached (the spatial query point is not a
        # differentiation path; canonical means still get gradients through
        # the identity term of mean_t = mean + dmean).
        dtype = self.decoder.net[-1].weight.dtype
        return self.decoder(self.encoder(means.detach().to(dtype), t))

    def deform(self, gaussians: GaussianSet, t: float) -> GaussianSet:
        """Deformed set at timestep t; color and ids unchanged.

        The rotation delta is added to the raw quaternion; renormalization
        happens where the quaternion is consumed (covariance construction), so
        a zero-initialized field reproduces the canonical set bit-exactly.
        """
        d = self.deformation(gaussians.means, t)
        dtype = gaussians.dtype
        opacity = gaussians.opacity_logits
        if self.config.opacity_deform:
            opacity = opacity + d.dopacity.to(dtype)
        return GaussianSet(
            means=gaussians.means + d.dmean.to(dtype),
            rotations=gaussians.rotations + d.drot.to(dtype),
            log_scales=gaussians.log_scales + d.dlog_scale.to(dtype),
            sh=gaussians.sh,
            opacity_logits=opacity,
            ids=gaussians.ids,
            aabb=gaussians.aabb,
        )

    def tv_loss(self) -> torch.Tensor:
        return self.encoder.tv_loss()

    def tv_loss_mean(self) -> torch.Tensor:
        """tv_loss normalized per squared-difference term.

        The trainer pairs this with the mean-reduced image loss so the two
        terms stay balanced independent of grid and image resolution.
        """
        return self.encoder.tv_loss() / max(self.encoder.tv_term_count(), 1)
