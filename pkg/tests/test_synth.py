import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from dynsplat.losses import mask_iou
from dynsplat.scene import Camera
from dynsplat.synth import (
    BACKGROUND_ID,
    AnalyticScene,
    Blob,
    blobs3,
    dvr_render,
    fibonacci_cameras,
    spiral_test_cameras,
    write_dataset,
)

ZERO3 = [0.0, 0.0, 0.0]
UNIT_AABB = [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]


def ball(segment_id, center, radius, color=(1.0, 1.0, 1.0), peak=40.0, parent=None) -> Blob:
    return Blob(
        segment_id=segment_id,
        color=color,
        center_poly=[list(center), ZERO3, ZERO3, ZERO3],
        radius_poly=[radius, 0.0, 0.0, 0.0],
        peak_density=peak,
        parent_id=parent,
    )


def head_on_camera(width=48, height=48):
    return Camera.look_at((0.0, -2.6, 0.0), (0.0, 0.0, 0.0), 0.75, width, height)


class TestDvrRender:
    def test_empty_scene_is_black_background(self):
        scene = AnalyticScene(blobs=[], aabb=UNIT_AABB)
        rgb, seg, blob = dvr_render(scene, head_on_camera(), 0.0)
        assert float(np.abs(rgb).sum()) == 0.0
        assert np.all(seg == BACKGROUND_ID)
        assert np.all(blob == BACKGROUND_ID)

    def test_opaque_blob_center_color(self):
        # High peak density: transmittance through the core is ~0, so the
        # center pixel converges to the blob color (1 - e^{-tau} -> 1).
        scene = AnalyticScene(blobs=[ball(1, (0, 0, 0), 0.3, color=(0.2, 0.9, 0.4), peak=500.0)],
                              aabb=UNIT_AABB)
        cam = head_on_camera(49, 49)
        rgb, seg, _ = dvr_render(scene, cam, 0.0)
        center = rgb[24, 24]
        assert np.allclose(center, (0.2, 0.9, 0.4), atol=0.02)
        assert seg[24, 24] == 1

    def test_two_disjoint_blobs_partition_by_silhouette(self):
        scene = AnalyticScene(
            blobs=[
                ball(1, (-0.45, 0.0, 0.0), 0.12, color=(1, 0, 0)),
                ball(2, (0.45, 0.0, 0.0), 0.12, color=(0, 0, 1)),
            ],
            aabb=UNIT_AABB,
        )
        rgb, seg, _ = dvr_render(scene, head_on_camera(64, 64), 0.0)
        fg = seg != BACKGROUND_ID
        left = seg == 1
        right = seg == 2
        assert left.sum() > 50 and right.sum() > 50
        # argmax partition: each silhouette matches its solo render exactly
        for sid, blob in ((1, scene.blobs[0]), (2, scene.blobs[1])):
            solo = AnalyticScene(blobs=[blob], aabb=UNIT_AABB)
            _, solo_seg, _ = dvr_render(solo, head_on_camera(64, 64), 0.0)
            iou = mask_iou(torch.from_numpy(seg == sid), torch.from_numpy(solo_seg == sid))
            assert iou > 0.98

    def test_alpha_conservation(self):
        scene = AnalyticScene(
            blobs=[ball(1, (-0.2, 0, 0), 0.25), ball(2, (0.25, 0, 0.1), 0.2, color=(1, 0, 0))],
            aabb=UNIT_AABB,
        )
        _, _, _, contrib, trans = dvr_render(scene, head_on_camera(32, 32), 0.0, with_aux=True)
        total = contrib.sum(axis=-1) + trans
        assert float(np.abs(total - 1.0).max()) < 1e-5

    def test_timesteps_move_blobs(self):
        blob = Blob(
            segment_id=1,
            color=(1, 1, 1),
            center_poly=[[-0.4, 0, 0], [0.8, 0, 0], ZERO3, ZERO3],
            radius_poly=[0.2, 0, 0, 0],
        )
        scene = AnalyticScene(blobs=[blob], aabb=UNIT_AABB)
        cam = head_on_camera()
        _, seg0, _ = dvr_render(scene, cam, 0.0)
        _, seg1, _ = dvr_render(scene, cam, 1.0)
        xs0 = np.nonzero(seg0 == 1)[1]
        xs1 = np.nonzero(seg1 == 1)[1]
        assert xs1.mean() > xs0.mean() + 10  # moved right in image space

    def test_shading_flag_changes_colors_only(self):
        scene = AnalyticScene(blobs=[ball(1, (0, 0, 0), 0.3)], aabb=UNIT_AABB)
        cam = head_on_camera(24, 24)
        plain_rgb, plain_seg, _ = dvr_render(scene, cam, 0.0, shading=False)
        shaded_rgb, shaded_seg, _ = dvr_render(scene, cam, 0.0, shading=True)
        assert np.array_equal(plain_seg, shaded_seg)
        assert not np.allclose(plain_rgb, shaded_rgb)


class TestHierarchy:
    def test_segment_map_rolls_children_into_parent(self):
        scene = AnalyticScene(
            blobs=[
                ball(3, (-0.3, 0, 0), 0.15, color=(0, 0, 1), parent=2),
                ball(4, (0.3, 0, 0), 0.15, color=(0, 0, 1), parent=2),
            ],
            aabb=UNIT_AABB,
        )
        _, seg, blob = dvr_render(scene, head_on_camera(), 0.0)
        assert set(np.unique(seg)) <= {BACKGROUND_ID, 2}
        assert set(np.unique(blob)) <= {BACKGROUND_ID, 3, 4}
        assert scene.top_level_id(3) == 2 and scene.top_level_id(1) == 1


class TestCameras:
    def test_fibonacci_positions_on_sphere(self):
        cams = fibonacci_cameras(16, radius=3.0, center=(0.1, -0.2, 0.3))
        center = np.asarray([0.1, -0.2, 0.3])
        for cam in cams:
            assert np.linalg.norm(cam.position.numpy() - center) == pytest.approx(3.0, abs=1e-5)

    def test_fibonacci_first_camera_near_pole(self):
        cam = fibonacci_cameras(1, radius=2.0)[0]
        # i=0 of the point set sits at z = 1 - 1/n = 0 for n=1; for n>=2 the
        # first point is the topmost sample.
        cams = fibonacci_cameras(4, radius=2.0)
        zs = [float(c.position[2]) for c in cams]
        assert zs[0] == max(zs)

    def test_look_at_center_hits_principal_point(self):
        for cam in fibonacci_cameras(5, radius=2.5):
            p = cam.world_to_cam(torch.zeros(3))
            cx, cy = cam.principal_point
            assert float(cam.focal * p[0] / p[2] + cx) == pytest.approx(cx, abs=1e-3)

    def test_spiral_endpoints_and_monotone_azimuth(self):
        cams = spiral_test_cameras(20, radius=2.0, turns=1.5, elevation_band=(-0.8, 0.8))
        z0 = float(cams[0].position[2])
        z1 = float(cams[-1].position[2])
        assert z0 == pytest.approx(2.0 * math.sin(-0.8), abs=1e-6)
        assert z1 == pytest.approx(2.0 * math.sin(0.8), abs=1e-6)
        azim = np.unwrap([math.atan2(float(c.position[1]), float(c.position[0])) for c in cams])
        assert np.all(np.diff(azim) > 0)
        assert azim[-1] - azim[0] == pytest.approx(1.5 * 2 * math.pi, abs=1e-6)

    def test_spiral_default_matches_standard_view_count(self):
        assert len(spiral_test_cameras()) == 181

    def test_spiral_needs_two(self):
        with pytest.raises(ValueError):
            spiral_test_cameras(1)


class TestWriteDataset:
    def test_regeneration_is_bit_identical(self, tmp_path):
        scene = AnalyticScene(blobs=[ball(1, (0, 0, 0), 0.25)], aabb=UNIT_AABB)
        a = tmp_path / "a"
        b = tmp_path / "b"
        write_dataset(scene, a, n_views=2, n_test_views=2, n_timesteps=2, width=16, height=16)
        write_dataset(scene, b, n_views=2, n_test_views=2, n_timesteps=2, width=16, height=16)
        files_a = sorted(p.name for p in a.iterdir())
        assert files_a == sorted(p.name for p in b.iterdir())
        for name in files_a:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_manifest_references_every_image(self, tmp_path):
        scene = AnalyticScene(blobs=[ball(1, (0, 0, 0), 0.25)], aabb=UNIT_AABB)
        out = tmp_path / "ds"
        manifest = write_dataset(scene, out, n_views=3, n_test_views=2, n_timesteps=2, width=16, height=16)
        for v in range(3):
            for t in range(2):
                assert (out / manifest["files"]["train_image"].format(v=v, t=t)).exists()
        n_train_imgs = len(list(out.glob("img_*.png")))
        assert n_train_imgs == 3 * 2

    def test_blobs3_fixture_structure(self, blobs3_dataset):
        ds = blobs3_dataset
        assert len(ds.train_cameras) == 20
        assert len(ds.test_cameras) == 10
        assert len(ds.timesteps) == 5
        table = ds.blob_table()
        assert [b["segment_id"] for b in table] == [1, 3, 4]
        assert ds.children_of(2) == [3, 4]
        colors = {tuple(np.round(b["color"], 2)) for b in table}
        assert len(colors) == 2  # two transfer-function colors
        # every segment visible in the solo masks of every test view
        for sid in (1, 2, 3, 4):
            assert ds.solo_mask(sid, 0, 2).sum() > 30

    def test_blobs3_manifest_hash_is_stable(self, blobs3_dataset):
        # The canonical fixture is pinned by content hash (see docs/fixtures.md).
        manifest_bytes = (blobs3_dataset.root / "manifest.json").read_bytes()
        digest = hashlib.sha256(manifest_bytes).hexdigest()
        recorded = json.loads(
            (Path(__file__).parent.parent / "docs" / "fixtures.json").read_text()
        )
        assert digest == recorded["blobs3"]["manifest_sha256"]
