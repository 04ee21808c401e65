"""Two-stage optimization: canonical warm-up, then joint Gaussian + field training.

Warm-up fits canonical Gaussians to all training images with no temporal
input; joint training samples one (view, timestep) image per iteration,
deforms, renders, and steps every parameter group under
L = L_base + lambda_tv * L_tv + lambda_dssim * L_dssim (DSSIM only in the
final window). Densification clones small high-gradient Gaussians, splits
large ones, and prunes nearly transparent ones, with Adam moments following.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict, fields

import numpy as np
import torch

from .checkpoint import Checkpoint
from .dataset import Dataset
from .deform import DeformField, FieldConfig
from .losses import dssim, l1_loss, l2_loss, psnr
from .optim import Adam, exponential_lr
from .render import render
from .scene import GaussianSet, quat_to_rotmat


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    warmup_iters: int = 3000
    joint_iters: int = 20000
    lambda_tv: float = 1e-4
    lambda_dssim: float = 0.2
    dssim_iters: int = 5000  # DSSIM active for the final N joint iterations
    loss: str = "l2+dssim"  # l1 | l2 | l2+dssim
    tv: bool = True
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-4
    lr_means: float = 1.6e-4
    lr_means_final_mult: float = 0.01
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    n_init: int = 2000
    max_gaussians: int = 5000
    sh_degree: int = 2
    densify_from: int = 500
    densify_until: int = 15000
    densify_every: int = 100
    densify_grad_thresh: float = 2e-4
    densify_scale_frac: float = 0.01  # of scene extent; above -> split, below -> clone
    split_shrink: float = 1.6
    prune_opacity: float = 0.005
    opacity_deform: bool = True
    warmup: bool = True
    encoder: str = "hybrid"
    encoder_n: int = 64
    encoder_t: int = 64
    rank_spatial: int = 16
    rank_temporal: int = 8
    fusion: str = "concat"
    decoder_hidden: int = 64
    decoder_layers: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.dssim_iters > self.joint_iters:
            raise ValueError("DSSIM window must fit inside the joint window")
        if self.loss not in ("l1", "l2", "l2+dssim"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def field_config(self) -> FieldConfig:
        return FieldConfig(
            encoder=self.encoder,
            n_grid=self.encoder_n,
            t_grid=self.encoder_t,
            rank_spatial=self.rank_spatial,
            rank_temporal=self.rank_temporal,
            fusion=self.fusion,
            decoder_hidden=self.decoder_hidden,
            decoder_layers=self.decoder_layers,
            opacity_deform=self.opacity_deform,
        )

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("# dynsplat training configuration (key = value)\n")
            for f in fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")

    @staticmethod
    def load(path) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(TrainConfig)}
        values = {}
        with open(path) as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{line_no}: expected 'key = value'")
                key, raw = (s.strip() for s in line.split("=", 1))
                if key not in kinds:
                    raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
                kind = kinds[key]
                if kind in ("bool", bool):
                    values[key] = raw.lower() in ("1", "true", "yes")
                elif kind in ("int", int):
                    values[key] = int(raw)
                elif kind in ("float", float):
                    values[key] = float(raw)
                else:
                    values[key] = raw
        return TrainConfig(**values)


def init_gaussians(aabb: torch.Tensor, n: int, seed: int, sh_degree: int) -> GaussianSet:
    """Uniform random means in the AABB, isotropic nearest-neighbor scales,
    opacity 0.1, gray color (no point cloud exists for synthetic volumes)."""
    gen = torch.Generator().manual_seed(seed)
    lo, hi = aabb[0], aabb[1]
    means = lo + (hi - lo) * torch.rand(n, 3, generator=gen)
    d = torch.cdist(means, means)
    d.fill_diagonal_(math.inf)
    knn = min(3, max(n - 1, 1))
    nn_dist = d.topk(knn, largest=False).values.mean(dim=1).clamp_min(1e-4)
    rotations = torch.zeros(n, 4)
    rotations[:, 0] = 1.0
    return GaussianSet(
        means=means,
        rotations=rotations,
        log_scales=torch.log(nn_dist)[:, None].expand(n, 3).clone(),
        sh=torch.zeros(n, 3, (sh_degree + 1) ** 2),
        opacity_logits=torch.full((n,), math.log(0.1 / 0.9)),
        ids=torch.arange(n),
        aabb=aabb.clone(),
    )


GAUSSIAN_GROUPS = ("means", "rotations", "log_scales", "sh", "opacity_logits")


class Trainer:
    def __init__(self, dataset: Dataset, config: TrainConfig, log=None):
        self.dataset = dataset
        self.config = config
        self.log = log
        torch.manual_seed(config.seed)
        self.gen = torch.Generator().manual_seed(config.seed)

        self.gaussians = init_gaussians(dataset.aabb, config.n_init, config.seed, config.sh_degree)
        for name in GAUSSIAN_GROUPS:
            getattr(self.gaussians, name).requires_grad_(True)
        self.field = DeformField(config.field_config(), dataset.aabb)

        lrs = {
            "means": config.lr_means,
            "rotations": config.lr_rotation,
            "log_scales": config.lr_scale,
            "sh": config.lr_sh,
            "opacity_logits": config.lr_opacity,
        }
        self.opt = Adam({n: getattr(self.gaussians, n) for n in GAUSSIAN_GROUPS}, lrs)
        field_params = dict(self.field.named_parameters())
        field_lrs = {
            name: (config.lr_decoder if name.startswith("decoder") else config.lr_encoder)
            for name in field_params
        }
        self.opt_field = Adam(field_params, field_lrs)

        self.global_iter = 0
        self.next_id = self.gaussians.count
        self.grad_acc = torch.zeros(self.gaussians.count)
        self.grad_den = torch.zeros(self.gaussians.count)
        self.loss_trace: list[float] = []
        self._warmup_order: list[tuple[int, int]] = []

    # ------------------------------------------------------------ sampling

    def _next_warmup_image(self) -> tuple[int, int]:
        if not self._warmup_order:
            n_v, n_t = len(self.dataset.train_cameras), len(self.dataset.timesteps)
            perm = torch.randperm(n_v * n_t, generator=self.gen).tolist()
            self._warmup_order = [(i // n_t, i % n_t) for i in perm]
        return self._warmup_order.pop()

    def _random_image(self) -> tuple[int, int]:
        n_v, n_t = len(self.dataset.train_cameras), len(self.dataset.timesteps)
        i = int(torch.randint(n_v * n_t, (1,), generator=self.gen))
        return i // n_t, i % n_t

    # ------------------------------------------------------------ steps

    def _base_loss(self, image: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if self.config.loss == "l1":
            return l1_loss(image, target)
        return l2_loss(image, target)

    def _step(self, view: int, t_index: int, joint: bool, joint_iter: int = 0) -> dict:
        cfg = self.config
        camera = self.dataset.train_cameras[view]
        target = self.dataset.train_image(view, t_index)

        if joint:
            t = self.dataset.timesteps[t_index]
            rendered = render(self.field.deform(self.gaussians, t), camera)
        else:
            rendered = render(self.gaussians, camera)

        parts = {"base": self._base_loss(rendered.image, target)}
        if joint and cfg.tv:
            parts["tv"] = cfg.lambda_tv * self.field.tv_loss_mean()
        dssim_on = (
            joint and cfg.loss == "l2+dssim" and joint_iter >= cfg.joint_iters - cfg.dssim_iters
        )
        if dssim_on:
            parts["dssim"] = cfg.lambda_dssim * dssim(rendered.image, target)
        loss = sum(parts.values())
        if not torch.isfinite(loss):
            detail = {k: float(v) for k, v in parts.items()}
            raise TrainingDiverged(f"non-finite loss at iteration {self.global_iter}: {detail}")

        self.opt.zero_grad()
        self.opt_field.zero_grad()
        loss.backward()

        with torch.no_grad():
            g = self.gaussians.means.grad
            if g is not None:
                norms = g.norm(dim=-1)
                self.grad_acc += norms
                self.grad_den += (norms > 0).float()

        total = cfg.warmup_iters + cfg.joint_iters
        self.opt.set_lr(
            "means", exponential_lr(cfg.lr_means, cfg.lr_means_final_mult, self.global_iter, total)
        )
        self.opt.step()
        if joint:
            self.opt_field.step()

        self.global_iter += 1
        if cfg.densify_from <= self.global_iter <= cfg.densify_until and (
            self.global_iter % cfg.densify_every == 0
        ):
            self.densify_prune()

        record = {k: float(v.detach()) for k, v in parts.items()}
        record["loss"] = float(loss.detach())
        self.loss_trace.append(record["loss"])
        return record

    # ------------------------------------------------------------ densify

    @torch.no_grad()
    def densify_prune(self):
        cfg = self.config
        gs = self.gaussians
        avg = torch.where(self.grad_den > 0, self.grad_acc / self.grad_den.clamp_min(1.0), torch.zeros_like(self.grad_acc))
        extent = float((gs.aabb[1] - gs.aabb[0]).max())
        scales = gs.scales()
        big = scales.max(dim=-1).values > cfg.densify_scale_frac * extent
        hot = avg > cfg.densify_grad_thresh

        budget = max(cfg.max_gaussians - gs.count, 0)
        clone_mask = hot & ~big
        split_mask = hot & big
        n_new = int(clone_mask.sum()) + 2 * int(split_mask.sum())
        if n_new > budget:
            # Keep the highest-gradient candidates within budget.
            order = torch.argsort(avg, descending=True)
            allowed = torch.zeros_like(hot)
            used = 0
            for i in order.tolist():
                if not bool(hot[i]):
                    break
                cost = 2 if bool(big[i]) else 1
                if used + cost > budget:
                    continue
                allowed[i] = True
                used += cost
            clone_mask &= allowed
            split_mask &= allowed

        pieces = {name: [getattr(gs, name).detach()] for name in GAUSSIAN_GROUPS}
        new_ids = [gs.ids]
        n_added = 0

        if bool(clone_mask.any()):
            n = int(clone_mask.sum())
            for name in GAUSSIAN_GROUPS:
                pieces[name].append(getattr(gs, name).detach()[clone_mask])
            new_ids.append(torch.arange(self.next_id, self.next_id + n))
            self.next_id += n
            n_added += n

        if bool(split_mask.any()):
            n = int(split_mask.sum())
            base = {name: getattr(gs, name).detach()[split_mask] for name in GAUSSIAN_GROUPS}
            child_scale = base["log_scales"] - math.log(cfg.split_shrink)
            for _ in range(2):
                offsets = torch.randn(n, 3, generator=self.gen) * scales[split_mask]
                world = (quat_to_rotmat(base["rotations"]) @ offsets.unsqueeze(-1)).squeeze(-1)
                pieces["means"].append(base["means"] + world)
                pieces["rotations"].append(base["rotations"].clone())
                pieces["log_scales"].append(child_scale.clone())
                pieces["sh"].append(base["sh"].clone())
                pieces["opacity_logits"].append(base["opacity_logits"].clone())
                new_ids.append(torch.arange(self.next_id, self.next_id + n))
                self.next_id += n
                n_added += n

        grown = {name: torch.cat(pieces[name]) for name in GAUSSIAN_GROUPS}
        grown_ids = torch.cat(new_ids)

        opacity = torch.sigmoid(grown["opacity_logits"])
        keep = opacity >= cfg.prune_opacity
        keep[: gs.count] &= ~split_mask  # split originals are replaced by children

        final = {}
        for name in GAUSSIAN_GROUPS:
            tensor = grown[name][keep].clone().requires_grad_(True)
            final[name] = tensor
            self.opt.append_rows(name, grown[name], n_added)
            self.opt.keep_rows(name, keep, tensor)

        self.gaussians = GaussianSet(
            means=final["means"],
            rotations=final["rotations"],
            log_scales=final["log_scales"],
            sh=final["sh"],
            opacity_logits=final["opacity_logits"],
            ids=grown_ids[keep],
            aabb=gs.aabb,
        )
        self.grad_acc = torch.zeros(self.gaussians.count)
        self.grad_den = torch.zeros(self.gaussians.count)

    # ------------------------------------------------------------ phases

    def warmup(self) -> GaussianSet:
        if self.dataset.n_train_images == 0:
            raise ValueError("empty dataset")
        iters = self.config.warmup_iters if self.config.warmup else 0
        for i in range(iters):
            view, t_index = self._next_warmup_image()
            record = self._step(view, t_index, joint=False)
            self._log("warmup", i, record)
        return self.gaussians

    def joint_train(self) -> tuple[GaussianSet, DeformField]:
        for i in range(self.config.joint_iters):
            view, t_index = self._random_image()
            record = self._step(view, t_index, joint=True, joint_iter=i)
            self._log("joint", i, record)
        return self.gaussians, self.field

    def run(self) -> Checkpoint:
        self.warmup()
        self.joint_train()
        return self.checkpoint()

    def checkpoint(self) -> Checkpoint:
        gs = self.gaussians.clone().expand_aabb()
        return Checkpoint(
            gaussians=gs,
            field=self.field,
            meta={
                "iteration": self.global_iter,
                "config_hash": self.config.hash(),
                "config": self.config.to_dict(),
            },
        )

    def _log(self, phase: str, iteration: int, record: dict):
        if self.log is None:
            return
        record = {"phase": phase, "iteration": iteration, "n_gaussians": self.gaussians.count, **record}
        self.log(record)


def evaluate_psnr(
    gaussians: GaussianSet, field: DeformField | None, dataset: Dataset,
    test: bool = True, views=None, t_indices=None,
) -> float:
    """Mean PSNR over (view, timestep) pairs of the held-out (or train) split."""
    cameras = dataset.test_cameras if test else dataset.train_cameras
    views = range(len(cameras)) if views is None else views
    t_indices = range(len(dataset.timesteps)) if t_indices is None else t_indices
    values = []
    with torch.no_grad():
        for v in views:
            for ti in t_indices:
                t = dataset.timesteps[ti]
                model = field.deform(gaussians, t) if field is not None else gaussians
                image = render(model, cameras[v]).image
                target = dataset.test_image(v, ti) if test else dataset.train_image(v, ti)
                values.append(psnr(image.clamp(0, 1), target))
    return float(np.mean(values))


def jsonl_logger(stream):
    """Metrics emitted as one JSON record per line."""

    def log(record: dict):
        stream.write(json.dumps(record) + "\n")

    return log
