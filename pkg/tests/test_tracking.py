import math

import numpy as np
import pytest
import torch

from dynsplat.coarse import view_independent_color, fibonacci_sphere
from dynsplat.deform import DeformField, FieldConfig
from dynsplat.render import render
from dynsplat.tracking import (
    Edit,
    SegmentRegistry,
    apply_edits,
    scene_render,
    track_render,
    velocity_colormap,
)
from support import gradcheck_camera, make_field_fixture, make_gradcheck_scene

F64 = torch.float64


def small_field(aabb):
    return DeformField(FieldConfig(n_grid=4, t_grid=3, rank_spatial=2, rank_temporal=1), aabb).double()


@pytest.fixture()
def world():
    s = make_gradcheck_scene(0, n=8)
    field = make_field_fixture(lambda: small_field(s.aabb), s, t=0.5, seed=21)
    registry = SegmentRegistry()
    seg = registry.add_segment("left", s.ids[:4].numpy(), {"time": 0.5})
    return s, field, registry, seg


class TestRegistry:
    def test_segment_linked_to_existing_ids(self, world):
        s, field, registry, seg = world
        assert seg.segment_id == 1
        assert registry.snapshot().segments[1].name == "left"

    def test_empty_segment_rejected(self):
        registry = SegmentRegistry()
        with pytest.raises(ValueError, match="nonempty"):
            registry.add_segment("empty", np.zeros(0, dtype=np.int64))

    def test_revision_bumps_on_mutation_only(self, world):
        s, field, registry, seg = world
        r0 = registry.revision
        registry.snapshot()
        assert registry.revision == r0
        registry.add_edit(Edit(segment_id=seg.segment_id, kind="recolor", rgb=(1, 0, 0)))
        assert registry.revision == r0 + 1

    def test_group_tracks_union(self, world):
        s, field, registry, seg = world
        other = registry.add_segment("right", s.ids[4:].numpy())
        group = registry.add_group([seg.segment_id, other.segment_id])
        ids = registry.member_gaussian_ids(group.group_id)
        assert set(ids.tolist()) == set(s.ids.tolist())

    def test_delete_cascades(self, world):
        s, field, registry, seg = world
        other = registry.add_segment("right", s.ids[4:].numpy())
        group = registry.add_group([seg.segment_id, other.segment_id])
        registry.add_edit(Edit(segment_id=seg.segment_id, kind="recolor", rgb=(1, 0, 0)))
        registry.delete_segment(seg.segment_id)
        snap = registry.snapshot()
        assert seg.segment_id not in snap.segments
        assert snap.edits == []
        assert snap.groups[group.group_id].member_ids == [other.segment_id]
        with pytest.raises(KeyError):
            registry.delete_segment(seg.segment_id)

    def test_save_load_roundtrip(self, world, tmp_path):
        s, field, registry, seg = world
        registry.add_edit(Edit(segment_id=seg.segment_id, kind="opacity_scale", factor=2.0))
        registry.add_edit(
            Edit(segment_id=seg.segment_id, kind="affine",
                 translation=(0.1, 0, 0), scale=1.5, pivot=(0.0, 0.0, 0.0))
        )
        registry.save(tmp_path / "segments.json")
        again = SegmentRegistry.load(tmp_path / "segments.json")
        assert set(again.segments) == set(registry.segments)
        assert len(again.edits) == 2
        assert again.edits[1].pivot == (0.0, 0.0, 0.0)
        new_seg = again.add_segment("more", s.ids[:2].numpy())
        assert new_seg.segment_id not in registry.segments  # next_id preserved


class TestEdits:
    def test_identity_edit_is_bit_exact(self, world):
        s, field, registry, seg = world
        registry.add_edit(
            Edit(segment_id=seg.segment_id, kind="affine",
                 translation=(0.0, 0.0, 0.0), scale=1.0, pivot=(0.1, 0.2, 0.3))
        )
        registry.add_edit(Edit(segment_id=seg.segment_id, kind="opacity_scale", factor=1.0))
        snap = registry.snapshot()
        deformed = field.deform(s, 0.4)
        edited = apply_edits(deformed, snap.edits, snap)
        assert torch.equal(edited.means, deformed.means)
        assert torch.equal(edited.log_scales, deformed.log_scales)
        # opacity roundtrips through sigmoid/logit: exact only up to fp
        assert torch.allclose(edited.opacity_logits, deformed.opacity_logits, atol=1e-5)

    def test_recolor_sets_view_independent_color_everywhere(self, world):
        s, field, registry, seg = world
        registry.add_edit(Edit(segment_id=seg.segment_id, kind="recolor", rgb=(1.0, 0.0, 0.0)))
        snap = registry.snapshot()
        dirs = fibonacci_sphere(64)
        for t in (0.0, 0.5, 1.0):
            edited = apply_edits(field.deform(s, t), snap.edits, snap)
            member = torch.isin(edited.ids, torch.from_numpy(seg.ids))
            colors = view_independent_color(edited.sh[member], dirs)
            assert torch.allclose(colors, torch.tensor([1.0, 0.0, 0.0], dtype=F64).expand_as(colors), atol=1e-6)
            other = view_independent_color(edited.sh[~member], dirs)
            assert not torch.allclose(other, torch.tensor([1.0, 0.0, 0.0], dtype=F64).expand_as(other), atol=1e-2)

    def test_affine_translation_exact_at_two_timesteps(self, world):
        s, field, registry, seg = world
        shift = (5.0, 0.0, 0.0)
        registry.add_edit(
            Edit(segment_id=seg.segment_id, kind="affine",
                 translation=shift, scale=1.0, pivot=(0.0, 0.0, 0.0))
        )
        snap = registry.snapshot()
        for t in (0.2, 0.9):
            plain = field.deform(s, t)
            edited = apply_edits(plain, snap.edits, snap)
            member = torch.isin(plain.ids, torch.from_numpy(seg.ids))
            delta = edited.means[member] - plain.means[member]
            assert torch.equal(delta, torch.tensor(shift, dtype=F64).expand_as(delta))
            assert torch.equal(edited.means[~member], plain.means[~member])

    def test_affine_scale_about_pivot(self, world):
        s, field, registry, seg = world
        pivot = (0.1, -0.1, 0.0)
        registry.add_edit(
            Edit(segment_id=seg.segment_id, kind="affine",
                 translation=(0.0, 0.0, 0.0), scale=2.0, pivot=pivot)
        )
        snap = registry.snapshot()
        plain = field.deform(s, 0.5)
        edited = apply_edits(plain, snap.edits, snap)
        member = torch.isin(plain.ids, torch.from_numpy(seg.ids))
        p = torch.tensor(pivot, dtype=F64)
        expected = p + 2.0 * (plain.means[member] - p)
        assert torch.allclose(edited.means[member], expected, atol=1e-12)
        assert torch.allclose(
            edited.log_scales[member], plain.log_scales[member] + math.log(2.0), atol=1e-12
        )

    def test_opacity_scale_multiplies_and_clamps(self, world):
        s, field, registry, seg = world
        registry.add_edit(Edit(segment_id=seg.segment_id, kind="opacity_scale", factor=3.0))
        snap = registry.snapshot()
        plain = field.deform(s, 0.0)
        edited = apply_edits(plain, snap.edits, snap)
        member = torch.isin(plain.ids, torch.from_numpy(seg.ids))
        got = torch.sigmoid(edited.opacity_logits[member])
        expected = (torch.sigmoid(plain.opacity_logits[member]) * 3.0).clamp(1e-6, 0.999)
        assert torch.allclose(got, expected, atol=1e-6)

    def test_edit_validation(self):
        with pytest.raises(ValueError):
            Edit(segment_id=1, kind="opacity_scale", factor=-1.0).validate()
        with pytest.raises(ValueError):
            Edit(segment_id=1, kind="affine", scale=0.0, translation=(0, 0, 0), pivot=(0, 0, 0)).validate()
        with pytest.raises(ValueError):
            Edit(segment_id=1, kind="warp").validate()


class TestTrackRender:
    def test_isolate_matches_member_render_at_creation_time(self, world):
        s, field, registry, seg = world
        snap = registry.snapshot()
        out = track_render(s, field, snap, seg.segment_id, 0.5, gradcheck_camera(), "isolate")
        member = torch.isin(s.ids, torch.from_numpy(seg.ids))
        direct = render(field.deform(s, 0.5).select(member), gradcheck_camera())
        assert torch.equal(out.image, direct.image)

    def test_tracking_is_stateless_over_time(self, world):
        s, field, registry, seg = world
        snap = registry.snapshot()
        cam = gradcheck_camera()
        first = track_render(s, field, snap, seg.segment_id, 0.2, cam, "isolate").image
        # visiting other timesteps in between changes nothing
        track_render(s, field, snap, seg.segment_id, 0.9, cam, "isolate")
        track_render(s, field, snap, seg.segment_id, 0.6, cam, "isolate")
        again = track_render(s, field, snap, seg.segment_id, 0.2, cam, "isolate").image
        assert torch.equal(first, again)

    def test_membership_constant_over_time(self, world):
        s, field, registry, seg = world
        snap = registry.snapshot()
        for t in (0.0, 0.4, 1.0):
            assert np.array_equal(snap.member_gaussian_ids(seg.segment_id), seg.ids)

    def test_modes_differ_but_share_support(self, world):
        s, field, registry, seg = world
        snap = registry.snapshot()
        cam = gradcheck_camera()
        isolate = track_render(s, field, snap, seg.segment_id, 0.5, cam, "isolate")
        hide = track_render(s, field, snap, seg.segment_id, 0.5, cam, "hide-others")
        highlight = track_render(s, field, snap, seg.segment_id, 0.5, cam, "highlight")
        assert not torch.equal(isolate.image, hide.image)
        assert not torch.equal(highlight.image, hide.image)
        # hide-others keeps everything faintly: alpha support is the full scene
        full = scene_render(s, field, snap, 0.5, cam, "full")
        assert float(hide.alpha.max()) <= float(full.alpha.max()) + 1e-9

    def test_unknown_segment_raises(self, world):
        s, field, registry, seg = world
        with pytest.raises(KeyError, match="unknown"):
            track_render(s, field, registry.snapshot(), 999, 0.5, gradcheck_camera(), "isolate")

    def test_edit_locality_in_pixels(self, world):
        s, field, registry, seg = world
        cam = gradcheck_camera()
        before_snap = registry.snapshot()
        before = scene_render(s, field, before_snap, 0.5, cam, "full", with_contrib=True)
        registry.add_edit(Edit(segment_id=seg.segment_id, kind="recolor", rgb=(0.0, 1.0, 0.0)))
        after = scene_render(s, field, registry.snapshot(), 0.5, cam, "full")
        changed = (before.image - after.image).abs().sum(dim=-1) > 1e-9
        member_rows = torch.isin(s.ids, torch.from_numpy(seg.ids))
        member_weight = before.contrib.weight_sum_per_row(s.count, None)
        # pixels where edited gaussians have nonzero weight
        touched = torch.zeros(16 * 16, dtype=torch.bool)
        sel = member_rows[before.contrib.row]
        touched[before.contrib.pixel[sel]] = True
        assert bool((changed.reshape(-1) & ~touched).any()) is False


class TestVelocity:
    def test_payload_encodes_sign_and_magnitude(self, world):
        s, field, registry, seg = world
        payload = velocity_colormap(s, field, 0.5)
        assert payload.shape == (s.count, 3)
        assert float(payload.min()) >= 0.0
        assert float(payload.max()) <= 1.0
        # red and green channels are mutually exclusive per gaussian
        assert float((payload[:, 0] * payload[:, 1]).abs().max()) == 0.0
        assert float(payload[:, 2].abs().max()) == 0.0

    def test_zero_field_velocity_is_black(self):
        s = make_gradcheck_scene(3)
        field = small_field(s.aabb)
        payload = velocity_colormap(s, field, 0.5)
        assert float(payload.abs().max()) == 0.0
