"""Canonical Gaussian scene representation: attributes, activations, covariance, SH color."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch

# Real spherical harmonics constants, bands 0..2.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)

QUAT_NORM_EPS = 1e-8
COV_REG_EPS = 1e-8


class DegenerateQuaternionError(ValueError):
    pass


class SingularCovarianceError(ValueError):
    pass


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_coeffs(n_coeffs: int) -> int:
    degree = int(round(math.sqrt(n_coeffs))) - 1
    if num_sh_coeffs(degree) != n_coeffs:
        raise ValueError(f"{n_coeffs} is not a valid SH coefficient count")
    if degree not in (0, 1, 2):
        raise ValueError(f"SH degree {degree} unsupported (expected 0, 1, or 2)")
    return degree


def normalize_quaternion(r: torch.Tensor) -> torch.Tensor:
    """Renormalize quaternions (..., 4); raises on near-zero norm."""
    norm = torch.linalg.norm(r, dim=-1, keepdim=True)
    if bool((norm <= QUAT_NORM_EPS).any()):
        raise DegenerateQuaternionError("quaternion norm below 1e-8")
    return r / norm


def quat_to_rotmat(r: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (..., 3, 3) from quaternions (..., 4) in (w, x, y, z) order."""
    q = normalize_quaternion(r)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def covariance(r: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """3D covariance R S S^T R^T from quaternion(s) r and activated scale(s) s.

    Accepts single (4,), (3,) inputs or batched (..., 4), (..., 3).
    """
    rot = quat_to_rotmat(r)
    rs = rot * s.unsqueeze(-2)  # columns of R scaled: R @ diag(s)
    return rs @ rs.transpose(-1, -2)


def gaussian_value(mean: torch.Tensor, cov: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Unnormalized Gaussian falloff exp(-0.5 (x-mu)^T cov^-1 (x-mu)), in (0, 1]."""
    cov = cov + COV_REG_EPS * torch.eye(3, dtype=cov.dtype, device=cov.device)
    d = (x - mean).reshape(-1, 3, 1)
    try:
        sol = torch.linalg.solve(cov, d)
    except torch.linalg.LinAlgError as exc:
        raise SingularCovarianceError(str(exc)) from exc
    power = -0.5 * (d * sol).sum(dim=(-2, -1))
    value = torch.exp(power)
    return value.reshape(x.shape[:-1])


def eval_sh(sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Evaluate SH color (pre-offset) for coefficients (..., C, K) at unit directions (..., 3).

    K = (L+1)^2 for degree L in {0, 1, 2}. The render-time color is
    clamp(eval_sh + 0.5, 0, 1); this function returns the raw basis expansion.
    """
    degree = sh_degree_from_coeffs(sh.shape[-1])
    result = SH_C0 * sh[..., 0]
    if degree >= 1:
        x, y, z = dirs[..., 0:1], dirs[..., 1:2], dirs[..., 2:3]
        result = result - SH_C1 * y * sh[..., 1] + SH_C1 * z * sh[..., 2] - SH_C1 * x * sh[..., 3]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        result = (
            result
            + SH_C2[0] * xy * sh[..., 4]
            + SH_C2[1] * yz * sh[..., 5]
            + SH_C2[2] * (2.0 * zz - xx - yy) * sh[..., 6]
            + SH_C2[3] * xz * sh[..., 7]
            + SH_C2[4] * (xx - yy) * sh[..., 8]
        )
    return result


def sh_from_rgb(rgb: torch.Tensor, degree: int) -> torch.Tensor:
    """DC-only SH coefficients (..., 3, K) whose rendered color is exactly `rgb`."""
    shape = rgb.shape[:-1] + (3, num_sh_coeffs(degree))
    sh = torch.zeros(shape, dtype=rgb.dtype, device=rgb.device)
    sh[..., 0] = (rgb - 0.5) / SH_C0
    return sh


def rendered_color(sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """View-dependent color used at render time: clamp(eval_sh + 0.5, 0, 1)."""
    return torch.clamp(eval_sh(sh, dirs) + 0.5, 0.0, 1.0)


@dataclass
class GaussianSet:
    """Structure-of-arrays canonical Gaussians.

    means (N,3), rotations (N,4) raw quaternions, log_scales (N,3),
    sh (N,3,K), opacity_logits (N,), ids (N,) stable int64, aabb (2,3).
    """

    means: torch.Tensor
    rotations: torch.Tensor
    log_scales: torch.Tensor
    sh: torch.Tensor
    opacity_logits: torch.Tensor
    ids: torch.Tensor
    aabb: torch.Tensor

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_coeffs(self.sh.shape[-1])

    @property
    def dtype(self) -> torch.dtype:
        return self.means.dtype

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def unit_rotations(self) -> torch.Tensor:
        return normalize_quaternion(self.rotations)

    def covariances(self) -> torch.Tensor:
        return covariance(self.rotations, self.scales())

    def validate(self) -> None:
        n = self.count
        for name in ("means", "rotations", "log_scales", "sh", "opacity_logits", "ids"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValueError(f"{name} length {arr.shape[0]} != count {n}")
        if n != len(torch.unique(self.ids)):
            raise ValueError("gaussian ids are not unique")
        for name in ("means", "rotations", "log_scales", "sh", "opacity_logits"):
            if not bool(torch.isfinite(getattr(self, name)).all()):
                raise ValueError(f"{name} contains non-finite values")
        scales = self.scales()
        if not bool((scales > 0).all() & torch.isfinite(scales).all()):
            raise ValueError("activated scales must be strictly positive and finite")
        o = self.opacities()
        if not bool(((o > 0) & (o < 1)).all()):
            raise ValueError("activated opacities must lie in (0, 1)")
        norms = torch.linalg.norm(self.rotations, dim=-1)
        if bool((norms <= QUAT_NORM_EPS).any()):
            raise ValueError("degenerate quaternion (norm <= 1e-8)")
        if n and not (
            bool((self.means >= self.aabb[0] - 1e-6).all())
            and bool((self.means <= self.aabb[1] + 1e-6).all())
        ):
            raise ValueError("AABB does not contain all means")

    def select(self, index: torch.Tensor) -> "GaussianSet":
        """Row subset (boolean mask or index tensor); aabb carried over."""
        return GaussianSet(
            means=self.means[index],
            rotations=self.rotations[index],
            log_scales=self.log_scales[index],
            sh=self.sh[index],
            opacity_logits=self.opacity_logits[index],
            ids=self.ids[index],
            aabb=self.aabb,
        )

    def clone(self) -> "GaussianSet":
        return GaussianSet(
            means=self.means.detach().clone(),
            rotations=self.rotations.detach().clone(),
            log_scales=self.log_scales.detach().clone(),
            sh=self.sh.detach().clone(),
            opacity_logits=self.opacity_logits.detach().clone(),
            ids=self.ids.clone(),
            aabb=self.aabb.clone(),
        )

    def with_(self, **updates) -> "GaussianSet":
        return replace(self, **updates)

    def to(self, dtype: torch.dtype) -> "GaussianSet":
        return GaussianSet(
            means=self.means.to(dtype),
            rotations=self.rotations.to(dtype),
            log_scales=self.log_scales.to(dtype),
            sh=self.sh.to(dtype),
            opacity_logits=self.opacity_logits.to(dtype),
            ids=self.ids,
            aabb=self.aabb.to(dtype),
        )

    def fit_aabb(self, margin: float = 0.0) -> "GaussianSet":
        lo = self.means.amin(dim=0)
        hi = self.means.amax(dim=0)
        pad = (hi - lo) * margin
        return self.with_(aabb=torch.stack([lo - pad, hi + pad]))

    def expand_aabb(self) -> "GaussianSet":
        """Grow (never shrink) the AABB to contain all means."""
        lo = torch.minimum(self.aabb[0], self.means.detach().amin(dim=0))
        hi = torch.maximum(self.aabb[1], self.means.detach().amax(dim=0))
        return self.with_(aabb=torch.stack([lo, hi]))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. `rotation` maps world to camera coords; camera looks along +z."""

    position: torch.Tensor  # (3,)
    rotation: torch.Tensor  # (3,3) world-to-camera, orthonormal
    fov_y: float  # vertical field of view, radians
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0
    name: str = ""

    def __post_init__(self):
        rot = self.rotation
        err = torch.linalg.norm(rot @ rot.T - torch.eye(3, dtype=rot.dtype))
        if float(err) > 1e-6:
            raise ValueError(f"camera rotation not orthonormal (|R R^T - I| = {float(err):.2e})")
        if not (0 < self.near < self.far):
            raise ValueError("camera requires 0 < near < far")
        if not (0 < self.fov_y < math.pi):
            raise ValueError("camera fov must lie in (0, pi)")

    @property
    def focal(self) -> float:
        return self.height / (2.0 * math.tan(self.fov_y / 2.0))

    @property
    def principal_point(self) -> tuple[float, float]:
        # Pixel centers are integer coordinates; the optical axis hits the image center.
        return ((self.width - 1) / 2.0, (self.height - 1) / 2.0)

    def world_to_cam(self, points: torch.Tensor) -> torch.Tensor:
        rot = self.rotation.to(points.dtype)
        pos = self.position.to(points.dtype)
        return (points - pos) @ rot.T

    @staticmethod
    def look_at(
        position,
        target,
        fov_y: float,
        width: int,
        height: int,
        near: float = 0.01,
        far: float = 100.0,
        name: str = "",
        dtype: torch.dtype = torch.float32,
    ) -> "Camera":
        """Camera at `position` looking at `target`, scene up = +z (fallback +y at poles)."""
        position = torch.as_tensor(position, dtype=torch.float64)
        target = torch.as_tensor(target, dtype=torch.float64)
        forward = target - position
        forward = forward / torch.linalg.norm(forward)
        up = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
        if float(torch.abs(forward @ up)) > 1.0 - 1e-6:
            up = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
        right = torch.linalg.cross(forward, up)
        right = right / torch.linalg.norm(right)
        down = torch.linalg.cross(forward, right)  # image v axis
        rotation = torch.stack([right, down, forward])
        return Camera(
            position=position.to(dtype),
            rotation=rotation.to(dtype),
            fov_y=fov_y,
            width=width,
            height=height,
            near=near,
            far=far,
            name=name,
        )
