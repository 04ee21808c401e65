"""Build the e2e fixture: a small blobs3 dataset and a hand-placed checkpoint.

Usage: python3 fixture.py OUT_DIR

Writes OUT_DIR/data (dataset) and OUT_DIR/model.ckpt. Gaussians are sampled
directly from the analytic blobs at t=0 with a zero-initialized deformation
field, so no training is needed and the scene is immediately clickable.
"""

import sys
from pathlib import Path

import torch

from dynsplat.checkpoint import Checkpoint, save_checkpoint
from dynsplat.deform import DeformField, FieldConfig
from dynsplat.scene import GaussianSet, sh_from_rgb
from dynsplat.synth import blobs3, write_dataset


def build(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = blobs3()
    write_dataset(scene, out_dir / "data", n_views=6, n_test_views=2, n_timesteps=2,
                  width=32, height=32)

    gen = torch.Generator().manual_seed(0)
    means, colors = [], []
    for blob, count in zip(scene.blobs, (70, 50, 50)):
        center = torch.tensor(blob.center(0.0), dtype=torch.float32)
        means.append(center + torch.randn(count, 3, generator=gen) * blob.radius(0.0) * 0.6)
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
    save_checkpoint(out_dir / "model.ckpt", Checkpoint(gaussians=gaussians, field=field))
    print(f"fixture written to {out_dir}")


if __name__ == "__main__":
    build(Path(sys.argv[1]))
