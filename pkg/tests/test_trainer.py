import math

import pytest
import torch

from dynsplat.losses import l2_loss
from dynsplat.render import render
from dynsplat.trainer import (
    TrainConfig,
    Trainer,
    TrainingDiverged,
    evaluate_psnr,
    init_gaussians,
)


def tiny_config(**kw) -> TrainConfig:
    defaults = dict(
        warmup_iters=30,
        joint_iters=40,
        dssim_iters=10,
        n_init=200,
        max_gaussians=400,
        densify_from=10,
        densify_until=60,
        densify_every=20,
        encoder_n=8,
        encoder_t=4,
        rank_spatial=4,
        rank_temporal=2,
        seed=0,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestConfig:
    def test_roundtrip_through_file(self, tmp_path):
        cfg = tiny_config(loss="l1", tv=False, lambda_tv=3e-5)
        path = tmp_path / "train.cfg"
        cfg.save(path)
        assert TrainConfig.load(path) == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("bogus_key = 3\n")
        with pytest.raises(ValueError, match="unknown key"):
            TrainConfig.load(path)

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = tmp_path / "ok.cfg"
        path.write_text("# comment\n\nwarmup_iters = 7  # trailing\n")
        assert TrainConfig.load(path).warmup_iters == 7

    def test_dssim_window_must_fit(self):
        with pytest.raises(ValueError, match="DSSIM"):
            TrainConfig(joint_iters=100, dssim_iters=200)

    def test_unknown_loss_rejected(self):
        with pytest.raises(ValueError, match="loss"):
            TrainConfig(loss="huber")

    def test_hash_changes_with_values(self):
        assert tiny_config().hash() != tiny_config(seed=1).hash()


class TestInit:
    def test_init_respects_invariants(self):
        aabb = torch.tensor([[-1.0, -1, -1], [1, 1, 1]])
        gs = init_gaussians(aabb, 100, seed=0, sh_degree=2)
        gs.validate()
        assert gs.count == 100
        assert float(gs.opacities().mean()) == pytest.approx(0.1, abs=1e-5)

    def test_deterministic(self):
        aabb = torch.tensor([[-1.0, -1, -1], [1, 1, 1]])
        a = init_gaussians(aabb, 50, seed=3, sh_degree=1)
        b = init_gaussians(aabb, 50, seed=3, sh_degree=1)
        assert torch.equal(a.means, b.means)
        assert torch.equal(a.log_scales, b.log_scales)


class TestWarmup:
    def test_zero_iterations_returns_init(self, mini_dataset):
        tr = Trainer(mini_dataset, tiny_config(warmup_iters=0, densify_from=10 ** 9))
        before = tr.gaussians.means.detach().clone()
        tr.warmup()
        assert torch.equal(tr.gaussians.means.detach(), before)

    def test_empty_dataset_rejected(self, mini_dataset, monkeypatch):
        tr = Trainer(mini_dataset, tiny_config())
        monkeypatch.setattr(type(mini_dataset), "n_train_images", property(lambda self: 0))
        with pytest.raises(ValueError, match="empty"):
            tr.warmup()

    @pytest.mark.slow
    def test_static_white_scene_reconstructs(self, white_dataset):
        # 200 iterations is a short budget, so run the attribute lrs hot.
        cfg = tiny_config(warmup_iters=200, joint_iters=0, dssim_iters=0,
                          n_init=600, max_gaussians=1200,
                          densify_from=10, densify_every=20, densify_until=150,
                          lr_means=3.2e-4, lr_sh=5e-3, lr_opacity=0.1,
                          lr_scale=1e-2, lr_rotation=2e-3)
        tr = Trainer(white_dataset, cfg)
        tr.warmup()
        psnr = evaluate_psnr(tr.gaussians, None, white_dataset, test=False, views=[0], t_indices=[0])
        assert psnr > 30.0


class TestJoint:
    def test_zero_init_field_matches_warmup_loss(self, mini_dataset):
        cfg = tiny_config(warmup_iters=10, densify_from=10 ** 9)
        tr = Trainer(mini_dataset, cfg)
        tr.warmup()
        cam = mini_dataset.train_cameras[0]
        target = mini_dataset.train_image(0, 0)
        with torch.no_grad():
            canonical = l2_loss(render(tr.gaussians, cam).image, target)
            deformed = l2_loss(
                render(tr.field.deform(tr.gaussians, mini_dataset.timesteps[0]), cam).image, target
            )
        assert float(canonical) == float(deformed)

    def test_loss_is_finite_and_recorded(self, mini_dataset):
        cfg = tiny_config()
        tr = Trainer(mini_dataset, cfg)
        tr.warmup()
        tr.joint_train()
        assert len(tr.loss_trace) == cfg.warmup_iters + cfg.joint_iters
        assert all(math.isfinite(v) for v in tr.loss_trace)

    def test_divergence_aborts_with_diagnostic(self, mini_dataset):
        tr = Trainer(mini_dataset, tiny_config(warmup_iters=1))
        with torch.no_grad():
            tr.gaussians.sh.fill_(float("nan"))
        with pytest.raises(TrainingDiverged, match="iteration"):
            tr._step(0, 0, joint=False)

    def test_pure_l2_config_degenerates(self, mini_dataset):
        # loss == "l2" disables DSSIM entirely, tv=False disables TV.
        cfg = tiny_config(loss="l2", tv=False)
        tr = Trainer(mini_dataset, cfg)
        tr.warmup()
        record = tr._step(0, 0, joint=True, joint_iter=cfg.joint_iters - 1)
        assert set(record) == {"base", "loss"}
        assert record["base"] == record["loss"]

    @pytest.mark.slow
    def test_loss_decreases_over_training(self, mini_dataset):
        import numpy as np

        cfg = tiny_config(warmup_iters=100, joint_iters=1000, dssim_iters=100,
                          n_init=300, max_gaussians=600, densify_until=400)
        tr = Trainer(mini_dataset, cfg)
        tr.warmup()
        tr.joint_train()
        joint = tr.loss_trace[cfg.warmup_iters:]
        head = float(np.median(joint[0:100]))
        tail = float(np.median(joint[900:1000]))
        assert tail < head

    @pytest.mark.slow
    def test_warmup_not_worse_than_no_warmup(self, mini_dataset):
        shared = dict(joint_iters=150, dssim_iters=30, n_init=250, max_gaussians=500,
                      densify_until=200)
        with_warm = Trainer(mini_dataset, tiny_config(warmup_iters=120, **shared))
        with_warm.run()
        without = Trainer(mini_dataset, tiny_config(warmup_iters=0, warmup=False, **shared))
        without.run()
        p_with = evaluate_psnr(with_warm.gaussians, with_warm.field, mini_dataset, test=False)
        p_without = evaluate_psnr(without.gaussians, without.field, mini_dataset, test=False)
        assert p_with >= p_without

    def test_implicit_encoder_runs_in_trainer(self, mini_dataset):
        cfg = tiny_config(encoder="implicit", warmup_iters=3, joint_iters=5, dssim_iters=2)
        tr = Trainer(mini_dataset, cfg)
        tr.run()
        assert len(tr.loss_trace) == 8


class TestDensify:
    def make_trainer(self, mini_dataset, **kw):
        tr = Trainer(mini_dataset, tiny_config(densify_from=10 ** 9, **kw))
        for _ in range(3):
            tr._step(0, 0, joint=False)
        return tr

    def test_no_candidates_leaves_set_unchanged(self, mini_dataset):
        tr = self.make_trainer(mini_dataset, densify_grad_thresh=1e9, prune_opacity=0.0)
        ids = tr.gaussians.ids.clone()
        tr.densify_prune()
        assert torch.equal(tr.gaussians.ids, ids)

    def test_transparent_gaussian_pruned(self, mini_dataset):
        tr = self.make_trainer(mini_dataset, densify_grad_thresh=1e9)
        with torch.no_grad():
            tr.gaussians.opacity_logits[5] = -10.0
        gone = int(tr.gaussians.ids[5])
        tr.densify_prune()
        assert gone not in tr.gaussians.ids.tolist()
        assert tr.gaussians.count == 199

    def test_split_replaces_one_with_two(self, mini_dataset):
        tr = self.make_trainer(mini_dataset, densify_grad_thresh=1e9, prune_opacity=0.0)
        # Force exactly one large, hot Gaussian.
        tr.grad_acc.zero_()
        tr.grad_den.fill_(1.0)
        tr.grad_acc[7] = 1.0
        with torch.no_grad():
            tr.gaussians.log_scales[7] = 0.0  # scale 1.0 >> scale_frac * extent
        tr.config.densify_grad_thresh = 0.5
        old_id = int(tr.gaussians.ids[7])
        n = tr.gaussians.count
        tr.densify_prune()
        assert tr.gaussians.count == n + 1
        assert old_id not in tr.gaussians.ids.tolist()

    def test_clone_appends_copy(self, mini_dataset):
        tr = self.make_trainer(mini_dataset, densify_grad_thresh=1e9, prune_opacity=0.0)
        tr.grad_acc.zero_()
        tr.grad_den.fill_(1.0)
        tr.grad_acc[3] = 1.0
        with torch.no_grad():
            tr.gaussians.log_scales[3] = math.log(0.005)  # below the split threshold -> clone
        tr.config.densify_grad_thresh = 0.5
        n = tr.gaussians.count
        mean = tr.gaussians.means[3].detach().clone()
        tr.densify_prune()
        assert tr.gaussians.count == n + 1
        assert torch.equal(tr.gaussians.means[-1].detach(), mean)

    def test_max_gaussians_never_exceeded(self, mini_dataset):
        cfg = tiny_config(max_gaussians=210, densify_grad_thresh=0.0,
                          densify_from=1, densify_every=5, densify_until=100)
        tr = Trainer(mini_dataset, cfg)
        for i in range(30):
            tr._step(i % 6, i % 2, joint=False)
            assert tr.gaussians.count <= 210

    def test_adam_state_tracks_rows(self, mini_dataset):
        tr = self.make_trainer(mini_dataset, densify_grad_thresh=1e9)
        tr.grad_acc.zero_()
        tr.grad_den.fill_(1.0)
        tr.grad_acc[3] = 1.0
        tr.config.densify_grad_thresh = 0.5
        tr.densify_prune()
        for name in ("means", "sh", "opacity_logits"):
            assert tr.opt.m[name].shape == tr.opt.params[name].shape
            assert tr.opt.params[name] is getattr(tr.gaussians, name)
        # Training continues cleanly after surgery.
        tr._step(0, 0, joint=True, joint_iter=0)


class TestDeterminism:
    def test_same_seed_identical_trace(self, mini_dataset):
        cfg = tiny_config(warmup_iters=15, joint_iters=20, dssim_iters=5)
        a = Trainer(mini_dataset, cfg)
        a.run()
        b = Trainer(mini_dataset, cfg)
        b.run()
        assert a.loss_trace == b.loss_trace
        assert torch.equal(a.gaussians.means.detach(), b.gaussians.means.detach())

    def test_different_seed_differs(self, mini_dataset):
        a = Trainer(mini_dataset, tiny_config(seed=0, warmup_iters=10, joint_iters=0, dssim_iters=0))
        a.warmup()
        b = Trainer(mini_dataset, tiny_config(seed=1, warmup_iters=10, joint_iters=0, dssim_iters=0))
        b.warmup()
        assert a.loss_trace != b.loss_trace


class TestCheckpointing:
    def test_checkpoint_roundtrips_from_trainer(self, mini_dataset, tmp_path):
        from dynsplat.checkpoint import load_checkpoint, save_checkpoint

        tr = Trainer(mini_dataset, tiny_config(warmup_iters=5, joint_iters=5, dssim_iters=2))
        ckpt = tr.run()
        save_checkpoint(tmp_path / "m.ckpt", ckpt)
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert loaded.meta["config_hash"] == tr.config.hash()
        cam = mini_dataset.train_cameras[0]
        with torch.no_grad():
            a = render(ckpt.gaussians.clone(), cam).image
            b = render(loaded.gaussians, cam).image
        assert torch.equal(a.float(), b.float())
