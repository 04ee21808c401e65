"""Coarse segmentation: view-independent colors, k-means in RGB, outlier removal."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .render import RenderOutput, pick
from .scene import GaussianSet, rendered_color


def fibonacci_sphere(n: int) -> torch.Tensor:
    """(n, 3) near-uniform unit directions from the spherical Fibonacci point set."""
    if n < 1:
        raise ValueError("need at least one direction")
    i = torch.arange(n, dtype=torch.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    golden = (1.0 + 5.0 ** 0.5) / 2.0
    phi = 2.0 * torch.pi * i * (1.0 - 1.0 / golden)
    r = torch.sqrt(torch.clamp(1.0 - z * z, min=0.0))
    return torch.stack([r * torch.cos(phi), r * torch.sin(phi), z], dim=-1)


def view_independent_color(sh: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
    """Mean rendered color over sampled view directions.

    sh: (..., 3, K) coefficients; directions: (D, 3) unit vectors.
    Converges to the DC band color as the direction count grows.
    """
    if directions.shape[0] < 1:
        raise ValueError("need at least one direction")
    dirs = directions.to(sh.dtype).reshape((1,) * (sh.ndim - 2) + (-1, 3))
    colors = rendered_color(sh.unsqueeze(-3), dirs)  # (..., D, 3)
    return colors.mean(dim=-2)


@dataclass
class CoarseSegmentation:
    labels: np.ndarray  # (N,) cluster label per Gaussian, aligned with set order
    gaussian_ids: np.ndarray  # (N,) ids the labels refer to
    centroids: np.ndarray  # (k, 3) representative colors
    k: int
    params: dict = field(default_factory=dict)

    def ids_of(self, label: int) -> np.ndarray:
        return self.gaussian_ids[self.labels == label]

    def label_of_id(self, gid: int) -> int:
        pos = np.nonzero(self.gaussian_ids == gid)[0]
        if pos.size == 0:
            raise KeyError(f"unknown gaussian id {gid}")
        return int(self.labels[pos[0]])

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "labels": self.labels.tolist(),
            "gaussian_ids": self.gaussian_ids.tolist(),
            "centroids": self.centroids.tolist(),
            "params": self.params,
        }

    @staticmethod
    def from_dict(d: dict) -> "CoarseSegmentation":
        return CoarseSegmentation(
            labels=np.asarray(d["labels"], dtype=np.int64),
            gaussian_ids=np.asarray(d["gaussian_ids"], dtype=np.int64),
            centroids=np.asarray(d["centroids"], dtype=np.float64),
            k=int(d["k"]),
            params=dict(d.get("params", {})),
        )


def kmeans_colors(colors: np.ndarray, k: int, seed: int = 0, max_iters: int = 100):
    """Lloyd k-means with k-means++ seeding; deterministic given the seed.

    Ties in the assignment step go to the lowest centroid index; empty clusters
    are reseeded to the point farthest from its assigned centroid.
    Returns (labels (N,), centroids (k, 3)).
    """
    colors = np.asarray(colors, dtype=np.float64)
    n = colors.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k={k} must be in [1, {n}]")
    rng = np.random.RandomState(seed)

    centroids = np.empty((k, 3))
    centroids[0] = colors[rng.randint(n)]
    d2 = ((colors - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[c] = colors[rng.randint(n)]
        else:
            centroids[c] = colors[np.searchsorted(np.cumsum(d2 / total), rng.random_sample())]
        d2 = np.minimum(d2, ((colors - centroids[c]) ** 2).sum(axis=1))

    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        dist = ((colors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = dist.argmin(axis=1)  # argmin takes the lowest index on ties
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            member = labels == c
            if member.any():
                centroids[c] = colors[member].mean(axis=0)
            else:
                worst = dist[np.arange(n), labels].argmax()
                centroids[c] = colors[worst]
    return labels, centroids


def segment_colors(gaussians: GaussianSet, n_directions: int = 256) -> np.ndarray:
    """Per-Gaussian approximate view-independent colors, (N, 3) in [0, 1]."""
    dirs = fibonacci_sphere(n_directions)
    return view_independent_color(gaussians.sh, dirs).detach().cpu().numpy()


def coarse_segmentation(
    gaussians: GaussianSet, k: int, seed: int = 0, n_directions: int = 256
) -> CoarseSegmentation:
    colors = segment_colors(gaussians, n_directions)
    labels, centroids = kmeans_colors(colors, k, seed)
    return CoarseSegmentation(
        labels=labels,
        gaussian_ids=gaussians.ids.cpu().numpy().copy(),
        centroids=centroids,
        k=k,
        params={"seed": seed, "n_directions": n_directions},
    )


def remove_outliers(
    ids: np.ndarray, gaussians: GaussianSet, radius: float, min_neighbors: int
) -> np.ndarray:
    """Keep segment members with >= min_neighbors other members within `radius`.

    Single pass over a uniform hash grid with cell size = radius; the distance
    test is inclusive (neighbors exactly at `radius` count).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    ids = np.asarray(ids, dtype=np.int64)
    all_ids = gaussians.ids.cpu().numpy()
    order = {g: i for i, g in enumerate(all_ids.tolist())}
    rows = np.asarray([order[g] for g in ids.tolist()], dtype=np.int64)
    pts = gaussians.means.detach().cpu().numpy()[rows]

    cells: dict[tuple, list[int]] = {}
    keys = np.floor(pts / radius).astype(np.int64)
    for i, key in enumerate(map(tuple, keys)):
        cells.setdefault(key, []).append(i)

    keep = np.zeros(len(ids), dtype=bool)
    r2 = radius * radius
    for i, key in enumerate(map(tuple, keys)):
        count = 0
        for ox in (-1, 0, 1):
            for oy in (-1, 0, 1):
                for oz in (-1, 0, 1):
                    for j in cells.get((key[0] + ox, key[1] + oy, key[2] + oz), ()):
                        if j != i and ((pts[j] - pts[i]) ** 2).sum() <= r2:
                            count += 1
        keep[i] = count >= min_neighbors
    return ids[keep]


def default_outlier_radius(ids: np.ndarray, gaussians: GaussianSet) -> float:
    """2x the median nearest-neighbor distance within the segment."""
    all_ids = gaussians.ids.cpu().numpy()
    order = {g: i for i, g in enumerate(all_ids.tolist())}
    rows = [order[g] for g in np.asarray(ids).tolist()]
    pts = gaussians.means.detach().cpu().numpy()[rows]
    if len(pts) < 2:
        return 1.0
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    np.fill_diagonal(d, np.inf)
    return 2.0 * float(np.median(d.min(axis=1)))


def segment_of_pixel(
    output: RenderOutput, gaussians: GaussianSet, seg: CoarseSegmentation, x: int, y: int
):
    """Cluster label of the pick()-dominant Gaussian at a pixel; None when empty."""
    gid = pick(output, gaussians, x, y)
    if gid is None:
        return None
    return seg.label_of_id(gid)
