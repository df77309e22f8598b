from dataclasses import replace

import numpy as np
import pytest
import torch

from posegen.errors import ShapeError
from posegen.synth import (
    BONES,
    DataConfig,
    default_spec,
    export_sample,
    generate_scene,
    joint_positions,
    load_dataset,
    load_sample,
    make_dataset,
    segment_distance,
    split,
)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(default_spec(11, 17), 17, 64, 64)


def test_same_spec_gives_identical_samples(scene):
    again = generate_scene(default_spec(11, 17), 17, 64, 64)
    for name in ("video", "pose", "hand", "reference", "gt_subject_mask"):
        assert torch.equal(getattr(scene, name), getattr(again, name))


def test_shapes_and_quantisation(scene):
    assert scene.video.shape == scene.pose.shape == scene.hand.shape == (3, 17, 64, 64)
    assert scene.gt_subject_mask.shape == (17, 64, 64)
    for t in (scene.video, scene.pose, scene.hand, scene.reference):
        assert torch.equal(torch.round(t * 255) / 255, t)


@pytest.mark.parametrize("seed", range(8))
def test_subject_coverage_in_range(seed):
    s = generate_scene(default_spec(seed, 5), 5, 64, 64)
    coverage = s.gt_subject_mask.sum().item() / s.gt_subject_mask.numel()
    assert 0.05 <= coverage <= 0.6


def test_static_motion_gives_constant_mask():
    spec = default_spec(3, 9)
    spec = replace(spec, motion_script=np.zeros_like(spec.motion_script))
    s = generate_scene(spec, 9, 64, 64)
    assert all(torch.equal(s.gt_subject_mask[0], s.gt_subject_mask[i]) for i in range(9))


def test_pose_render_lies_on_dilated_limb_segments(scene):
    """Analytic rasterisation: every lit pose pixel is within 1 px of a bone or hand joint."""
    H = W = 64
    py, px = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    for f in range(scene.frames):
        joints = np.clip(joint_positions(scene.spec.appearance, scene.spec.motion_script[f], H, W), 0, 63) + 0.5
        near = np.zeros((H, W), bool)
        for a, b in BONES:
            near |= segment_distance(px, py, joints[a], joints[b]) <= 1.0
        lit = scene.pose[:, f].sum(0).numpy() > 0
        assert lit.any()
        assert not (lit & ~near).any()


def test_skeleton_lies_inside_subject_mask(scene):
    lit = scene.pose.sum(0) > 0
    assert bool((lit <= (scene.gt_subject_mask > 0)).all())


def test_hand_render_is_small_patches_inside_mask(scene):
    lit = scene.hand.sum(0) > 0
    assert lit.any()
    assert bool((lit <= (scene.gt_subject_mask > 0)).all())
    assert lit.sum(dim=(1, 2)).max() <= 2 * 25


def test_reference_shares_appearance_not_pose(scene):
    assert not torch.equal(scene.reference, scene.video[:, 0])
    # the reference background outside both subjects equals the video background
    ref_subject = (scene.reference != scene.video[:, 0]).any(0)
    bg = (scene.gt_subject_mask[0] == 0) & ~ref_subject
    assert bg.float().mean() > 0.7


def test_frame_size_must_be_divisible():
    with pytest.raises(ShapeError):
        generate_scene(default_spec(0, 5), 5, 60, 64)
    with pytest.raises(ShapeError):
        generate_scene(default_spec(0, 5), 9, 64, 64)


def test_out_of_frame_motion_is_clamped_and_flagged():
    spec = default_spec(4, 3)
    motion = spec.motion_script.copy()
    motion[:, 0] = 2.0
    s = generate_scene(replace(spec, motion_script=motion), 3, 64, 64)
    assert s.clamped


def test_dataset_backgrounds_are_distinct():
    data = make_dataset(16, DataConfig(frames=1), seed=5)
    bgs = [d.video[:, 0] * (1 - d.gt_subject_mask[0]) for d in data]
    for i in range(16):
        for j in range(i + 1, 16):
            assert not torch.equal(bgs[i], bgs[j])


def test_single_scene_dataset_reproducible():
    a, b = make_dataset(1, DataConfig(frames=5), 3), make_dataset(1, DataConfig(frames=5), 3)
    assert len(a) == 1 and torch.equal(a[0].video, b[0].video)


def test_split_parity():
    train, val = split(list(range(7)))
    assert train == [0, 2, 4, 6] and val == [1, 3, 5]


def test_export_load_roundtrip(tmp_path, scene):
    export_sample(scene, tmp_path / "s0")
    back = load_sample(tmp_path / "s0")
    for name in ("video", "pose", "hand", "reference", "gt_subject_mask"):
        assert torch.equal(getattr(back, name), getattr(scene, name))
    assert back.spec.caption_tokens == scene.spec.caption_tokens
    assert np.array_equal(back.spec.motion_script, scene.spec.motion_script)
    assert len(load_dataset(tmp_path)) == 1
