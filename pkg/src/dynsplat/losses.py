"""Scalar losses and image metrics: L1/L2, SSIM/DSSIM, PSNR, IoU, contrastive."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def l2_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared difference (mean over pixels and channels)."""
    _check_shapes(rendered, target)
    return (rendered - target).square().mean()


def l1_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_shapes(rendered, target)
    return (rendered - target).abs().mean()


def _gaussian_window(dtype: torch.dtype) -> torch.Tensor:
    half = (SSIM_WINDOW - 1) / 2.0
    xs = torch.arange(SSIM_WINDOW, dtype=dtype) - half
    g = torch.exp(-(xs * xs) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1.

    Inputs are (H, W) or (H, W, C); statistics are computed over valid window
    positions only and the per-channel means are averaged.
    """
    _check_shapes(a, b)
    if a.ndim == 2:
        a, b = a.unsqueeze(-1), b.unsqueeze(-1)
    H, W, C = a.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = _gaussian_window(a.dtype).expand(C, 1, SSIM_WINDOW, SSIM_WINDOW)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)

    mu_x = F.conv2d(x, win, groups=C)
    mu_y = F.conv2d(y, win, groups=C)
    xx = F.conv2d(x * x, win, groups=C) - mu_x * mu_x
    yy = F.conv2d(y * y, win, groups=C) - mu_y * mu_y
    xy = F.conv2d(x * y, win, groups=C) - mu_x * mu_y

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return (num / den).mean()


def dssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Structural dissimilarity 1 - ssim(a, b)."""
    return 1.0 - ssim(a, b)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; +inf when identical."""
    _check_shapes(a, b)
    mse = float((a - b).square().mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def mask_iou(a: torch.Tensor, b: torch.Tensor) -> float:
    """Intersection over union of binary masks; 1.0 when both are empty."""
    _check_shapes(a, b)
    a = a.bool()
    b = b.bool()
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def cosine_similarity(f1: torch.Tensor, f2: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Cosine similarity along the last dim; zero-norm vectors handled with eps."""
    n1 = torch.linalg.norm(f1, dim=-1).clamp_min(eps)
    n2 = torch.linalg.norm(f2, dim=-1).clamp_min(eps)
    return (f1 * f2).sum(dim=-1) / (n1 * n2)


def contrastive_loss(f1: torch.Tensor, f2: torch.Tensor, same_mask: torch.Tensor) -> torch.Tensor:
    """Mean over pairs of (1 - cos) for same-mask pairs and (cos) for cross pairs.

    f1, f2: (P, D) features of the two pixels of each pair; same_mask: (P,) bool.
    """
    if f1.shape[0] == 0:
        return torch.zeros((), dtype=f1.dtype)
    cos = cosine_similarity(f1, f2)
    return torch.where(same_mask, 1.0 - cos, cos).mean()


def sample_pairs(
    labels: torch.Tensor,
    n_pairs: int,
    generator: torch.Generator,
    background: int = -1,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Sample pixel-index pairs for the contrastive loss, stratified ~half same-label.

    labels: (P,) int labels, `background` marks unmasked pixels. Same-label
    pairs are drawn within real masks only; background joins cross pairs only
    (background-background pairs carry no signal and are excluded).
    Returns (i, j, same) index tensors.
    """
    labels = labels.reshape(-1)
    n = labels.numel()
    device = labels.device
    masked = torch.nonzero(labels != background, as_tuple=False).squeeze(-1)

    same_i = []
    same_j = []
    unique = [int(v) for v in torch.unique(labels[masked])] if masked.numel() else []
    groups = {v: torch.nonzero(labels == v, as_tuple=False).squeeze(-1) for v in unique}
    groups = {v: g for v, g in groups.items() if g.numel() >= 2}
    if groups:
        per_group = max(1, (n_pairs // 2) // len(groups))
        for g in groups.values():
            a = g[torch.randint(g.numel(), (per_group,), generator=generator, device=device)]
            b = g[torch.randint(g.numel(), (per_group,), generator=generator, device=device)]
            same_i.append(a)
            same_j.append(b)
    n_same = int(sum(t.numel() for t in same_i))

    n_cross = max(n_pairs - n_same, 0)
    ci = torch.randint(n, (4 * n_cross + 8,), generator=generator, device=device)
    cj = torch.randint(n, (4 * n_cross + 8,), generator=generator, device=device)
    ok = (labels[ci] != labels[cj]) & ((labels[ci] != background) | (labels[cj] != background))
    ci, cj = ci[ok][:n_cross], cj[ok][:n_cross]

    i = torch.cat(same_i + [ci]) if same_i else ci
    j = torch.cat(same_j + [cj]) if same_j else cj
    same = torch.cat([torch.ones(n_same, dtype=torch.bool), torch.zeros(ci.numel(), dtype=torch.bool)])
    return i, j, same
