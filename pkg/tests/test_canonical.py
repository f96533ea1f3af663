import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsplat.canonical import (
    AlignConfig,
    AlignmentState,
    LabeledCloud,
    align_loss,
    coarse_align,
    color_entropy,
    disentangle,
    estimate_focal,
    fine_align,
    keyframe_graph,
    plan_clips,
    pose_errors,
    scene_diameter,
    select_reference_and_fuse,
    smoothness_term,
    voxel_downsample,
    weighted_median,
)
from flowsplat.errors import ConfigError
from flowsplat.geometry import DTYPE, Pose, project, se3_exp, compose
from flowsplat.harness import HarnessOracle, generate, preset


@pytest.fixture(scope="module")
def scene():
    return generate(preset("moving-sphere", n_frames=12))


def truth_state(gt, frames=None):
    frames = list(range(len(gt.frames))) if frames is None else frames
    fs = [gt.frames[i] for i in frames]
    depth = torch.tensor(np.stack([f.depth for f in fs]), dtype=DTYPE)
    conf = torch.tensor(np.stack([(f.ids >= 0).astype(float) for f in fs]), dtype=DTYPE)
    return AlignmentState([f.camera.pose for f in fs], [f.camera.intrinsics for f in fs], depth, conf,
                          [False] * len(fs), list(frames))


def diameter(gt):
    return scene_diameter(np.concatenate([f.points[f.ids >= 0] for f in gt.frames]))


def connected(n, edges):
    seen, todo = {0}, [0]
    adj = {k: set() for k in range(n)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    while todo:
        for j in adj[todo.pop()] - seen:
            seen.add(j)
            todo.append(j)
    return len(seen) == n


# --------------------------------------------------------------------------- clip planning


def test_plan_clips_examples():
    p = plan_clips(60, 25)
    assert p.clips == [range(0, 25), range(25, 50), range(50, 60)]
    assert p.keyframes == [0, 25, 50]
    p = plan_clips(10, 25)
    assert p.clips == [range(0, 10)] and p.keyframes == [0] and p.graph_edges == []
    p = plan_clips(192, 25)
    assert len(p.clips) == 8 and len(p.graph_edges) == 28


def test_plan_clips_errors():
    with pytest.raises(ConfigError):
        plan_clips(0)
    with pytest.raises(ConfigError):
        plan_clips(10, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 500), st.integers(2, 40))
def test_clips_partition_and_graph_connected(n, clip_len):
    p = plan_clips(n, clip_len)
    covered = [i for c in p.clips for i in c]
    assert covered == list(range(n))
    assert p.keyframes == [c.start for c in p.clips]
    assert all(len(c) == clip_len for c in p.clips[:-1])
    assert connected(len(p.keyframes), p.graph_edges)


def test_long_graph_is_chain_plus_skips():
    e = keyframe_graph(15)
    assert all((k, k + 1) in e for k in range(14))
    assert (0, 3) in e and (9, 12) in e and (1, 4) not in e


# --------------------------------------------------------------------------- align loss


def test_truth_state_has_zero_consistency(scene):
    orc = HarnessOracle(scene)
    st_ = truth_state(scene)
    for a, b in ((0, 5), (3, 3), (11, 2)):
        loss, empty = align_loss(orc.point_maps(a, b), st_, a, b)
        assert not empty and loss.item() < 1e-9
    frames = list(range(12))
    loss, _ = align_loss(orc.point_maps(0, 5), st_, 0, 5, smooth_frames=frames)
    expected = 0.01 * smoothness_term(st_.poses).item()
    assert abs(loss.item() - expected) < 1e-9


def test_pose_perturbation_increases_loss(scene):
    orc = HarnessOracle(scene)
    st_ = truth_state(scene)
    base, _ = align_loss(orc.point_maps(0, 6), st_, 0, 6)
    rng = np.random.default_rng(0)
    for _ in range(3):
        xi = torch.tensor(rng.normal(size=6) * 0.02, dtype=DTYPE)
        bad = truth_state(scene)
        bad.poses[6] = compose(se3_exp(xi), bad.poses[6])
        assert align_loss(orc.point_maps(0, 6), bad, 0, 6)[0].item() > base.item() + 1e-6


def test_fully_dynamic_masks_give_zero_consistency(scene):
    orc = HarnessOracle(scene)
    st_ = truth_state(scene)
    st_.poses[4] = compose(se3_exp(torch.full((6,), 0.1, dtype=DTYPE)), st_.poses[4])
    masks = [np.ones((32, 32), dtype=bool)] * 12
    loss, empty = align_loss(orc.point_maps(1, 4), st_, 1, 4, masks=masks)
    assert empty and loss.item() == 0.0


def test_weighted_median():
    v = torch.tensor([3.0, 1.0, 2.0, 10.0], dtype=DTYPE)
    assert weighted_median(v, torch.ones(4, dtype=DTYPE)).item() == 2.0
    assert weighted_median(v, torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=DTYPE)).item() == 10.0
    assert weighted_median(v, torch.zeros(4, dtype=DTYPE)).item() == 1.0


def test_estimate_focal_exact(scene):
    orc = HarnessOracle(scene)
    m = orc.point_maps(2, 2)
    k = scene.frames[2].camera.intrinsics
    assert abs(estimate_focal(m.X_aa, m.C_aa, k.cx, k.cy) - k.fx) < 1e-9


# --------------------------------------------------------------------------- alignment


def test_single_keyframe_returns_initialization(scene):
    orc = HarnessOracle(scene)
    out = coarse_align(plan_clips(12, 25), orc)
    assert len(out.poses) == 1
    assert torch.equal(out.poses[0].rotation, torch.eye(3, dtype=DTYPE))
    m = orc.point_maps(0, 0)
    assert torch.equal(out.depths[0], torch.where(m.C_aa > 0, m.X_aa[..., 2], torch.zeros_like(m.C_aa)))


def test_fixed_poses_stay_bit_exact(scene):
    orc = HarnessOracle(scene, noise=0.01)
    plan = plan_clips(12, 4)
    fixed = [scene.frames[k].camera.pose for k in plan.keyframes]
    out = coarse_align(plan, orc, fixed_keyframe_poses=fixed, cfg=AlignConfig(steps=20))
    for a, b in zip(out.poses, fixed):
        assert torch.equal(a.rotation, b.rotation) and torch.equal(a.translation, b.translation)
    with pytest.raises(ConfigError):
        coarse_align(plan, orc, fixed_keyframe_poses=fixed[:1])


def test_noiseless_alignment_recovers_poses(scene):
    orc = HarnessOracle(scene)
    masks = [f.mask for f in scene.frames]
    plan = plan_clips(12, 4)
    coarse = coarse_align(plan, orc, masks=masks)
    full = fine_align(plan, orc, coarse, masks=masks)
    rot, trans = pose_errors(full.poses, [f.camera.pose for f in scene.frames], diameter(scene))
    assert rot.max() < 0.5 and trans.max() < 0.01
    assert abs(float(full.intrinsics[0].fx) - 36.0) < 0.36


def test_fine_align_keeps_keyframes_bit_exact(scene):
    orc = HarnessOracle(scene, noise=0.01, seed=3)
    plan = plan_clips(12, 4)
    coarse = coarse_align(plan, orc, cfg=AlignConfig(steps=30))
    full = fine_align(plan, orc, coarse, cfg=AlignConfig(steps=30, fine_steps=30))
    for k in plan.keyframes:
        i = coarse.index(k)
        assert torch.equal(full.poses[k].rotation, coarse.poses[i].rotation)
        assert torch.equal(full.poses[k].translation, coarse.poses[i].translation)
        assert torch.equal(full.depths[k], coarse.depths[i])
        assert full.fixed[k]


def test_fine_align_single_frame_clips_noop(scene):
    orc = HarnessOracle(scene, frames=[0, 4, 8])
    plan = plan_clips(3, 2)  # clips [0,1], [2]
    coarse = coarse_align(plan, orc, cfg=AlignConfig(steps=10))
    full = fine_align(plan, orc, coarse, cfg=AlignConfig(steps=10, fine_steps=10))
    k = coarse.index(2)
    assert torch.equal(full.poses[2].rotation, coarse.poses[k].rotation)
    assert torch.equal(full.depths[2], coarse.depths[k])


def test_pose_errors_zero_for_identical(scene):
    poses = [f.camera.pose for f in scene.frames]
    r, t = pose_errors(poses, poses, 1.0)
    assert r.max() < 1e-6 and t.max() < 1e-12


# --------------------------------------------------------------------------- oracle


def test_oracle_self_pair(scene):
    m = HarnessOracle(scene).point_maps(5, 5)
    assert torch.equal(m.X_aa, m.X_ab)
    covered = torch.from_numpy(scene.frames[5].ids >= 0) & ~torch.from_numpy(scene.frames[5].mask)
    assert torch.all(m.C_aa[covered] == 1.0)


def test_oracle_matches_geometry(scene):
    orc = HarnessOracle(scene)
    for a, b in ((0, 7), (9, 1)):
        m = orc.point_maps(a, b)
        ta = scene.frames[a].camera.pose
        fb = scene.frames[b]
        ok = fb.ids >= 0
        expected = fb.points[ok] @ ta.rotation.numpy().T + ta.translation.numpy()
        assert np.abs(m.X_ab.numpy()[ok] - expected).max() < 1e-9


def test_oracle_noise_statistics(scene):
    orc = HarnessOracle(scene, noise=0.01, seed=5)
    rel = []
    while sum(len(r) for r in rel) < 100_000:
        k = len(rel)
        a, b = k % 12, (k * 5 + 1) % 12
        m = orc.point_maps(a, b)
        d = scene.frames[a].depth
        ok = scene.frames[a].ids >= 0
        rel.append(m.X_aa.numpy()[..., 2][ok] / d[ok] - 1)
    std = np.concatenate(rel).std()
    assert abs(std - 0.01) < 0.001


def test_oracle_deterministic(scene):
    a = HarnessOracle(scene, noise=0.02, seed=9).point_maps(1, 3)
    b = HarnessOracle(scene, noise=0.02, seed=9).point_maps(1, 3)
    assert torch.equal(a.X_ab, b.X_ab) and torch.equal(a.C_ab, b.C_ab)


# --------------------------------------------------------------------------- clouds


def test_all_static_masks_give_empty_dynamic(scene):
    st_ = truth_state(scene)
    masks = [np.zeros((32, 32), dtype=bool)] * 12
    p_stat, p_dyn = disentangle(st_, masks, [f.image for f in scene.frames])
    assert len(p_dyn) == 0
    assert len(p_stat) == sum(int((f.ids >= 0).sum()) for f in scene.frames)


def test_checkerboard_split(scene):
    st_ = truth_state(scene, [0, 1])
    v, u = np.mgrid[:32, :32]
    board = (u + v) % 2 == 1
    masks = [board, board]
    p_stat, p_dyn = disentangle(st_, masks, [f.image for f in scene.frames])
    ok = [scene.frames[i].ids >= 0 for i in (0, 1)]
    assert len(p_dyn) == sum(int((o & board).sum()) for o in ok)
    assert len(p_stat) == sum(int((o & ~board).sum()) for o in ok)


def test_confidence_threshold(scene):
    st_ = truth_state(scene, [0])
    st_.confidence[0, :16] = 0.5
    p_stat, p_dyn = disentangle(st_, [scene.frames[0].mask], [scene.frames[0].image])
    assert (np.concatenate([p_stat.pixel, p_dyn.pixel])[:, 1] >= 16).all()


def test_dynamic_points_inside_object(scene):
    st_ = truth_state(scene)
    _, p_dyn = disentangle(st_, [f.mask for f in scene.frames], [f.image for f in scene.frames])
    sph = scene.spec.dynamic_spheres[0]
    times = scene.spec.times()
    r = sph.radius * 1.1
    inside = [np.all(np.abs(p - sph.position(times[fr])) <= r) for p, fr in zip(p_dyn.points, p_dyn.frame)]
    assert len(p_dyn) > 0 and np.mean(inside) >= 0.95


def test_cloud_reprojects_to_source_pixel(scene):
    st_ = truth_state(scene)
    p_stat, p_dyn = disentangle(st_, [f.mask for f in scene.frames], [f.image for f in scene.frames])
    cloud = LabeledCloud.cat([p_stat, p_dyn])
    for fr in range(12):
        sel = cloud.frame == fr
        uv, _ = project(torch.from_numpy(cloud.points[sel]), st_.camera(fr))
        assert np.abs(uv.numpy() - cloud.pixel[sel]).max() < 0.5


def _frames_with_masks(areas, colors=None, h=8, w=8):
    masks, frames = [], []
    for k, area in enumerate(areas):
        m = np.zeros((h, w), dtype=bool)
        m.reshape(-1)[:area] = True
        img = np.zeros((h, w, 3))
        img[m] = colors[k] if colors is not None else 0.5
        masks.append(m)
        frames.append(img)
    return masks, frames


def _cloud(points, frames):
    n = len(points)
    return LabeledCloud(np.asarray(points, dtype=float), np.full((n, 3), 0.5), np.asarray(frames), np.zeros(n, dtype=bool),
                        np.zeros((n, 2), dtype=np.int64))


def test_reference_frame_dominance():
    masks, frames = _frames_with_masks([10, 25, 12])
    stat = _cloud([[0, 0, 0], [1, 1, 1]], [0, 1])
    dyn = _cloud([[0.5, 0.5, 0.5]] * 3, [0, 1, 2])
    d, s, ref = select_reference_and_fuse(stat, dyn, masks, frames, [0])
    assert ref == 1 and len(d) == 1 and (d.frame == 1).all()


def test_reference_frame_tie_goes_to_first():
    masks, frames = _frames_with_masks([10, 10, 10])
    stat = _cloud([[0, 0, 0], [1, 1, 1]], [0, 2])
    assert select_reference_and_fuse(stat, LabeledCloud.empty(), masks, frames, [0])[2] == 0


def test_entropy_breaks_count_ties():
    masks, frames = _frames_with_masks([16, 16])
    frames[1][masks[1]] = np.linspace(0, 1, 16)[:, None] * np.ones(3)
    assert color_entropy(frames[1][masks[1]]) > color_entropy(frames[0][masks[0]]) == 0.0
    stat = _cloud([[0, 0, 0], [1, 1, 1]], [0, 1])
    assert select_reference_and_fuse(stat, LabeledCloud.empty(), masks, frames, [0])[2] == 1


def test_fusion_uses_reference_and_keyframes_only():
    masks, frames = _frames_with_masks([1, 1, 5])
    stat = _cloud([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], [0, 1, 2, 3])
    _, s, ref = select_reference_and_fuse(stat, LabeledCloud.empty(), masks, frames + [frames[0]], [0])
    assert ref == 2
    assert sorted(s.frame.tolist()) == [0, 2]


def test_voxel_one_representative_per_voxel():
    pts = [[0.01, 0.01, 0.01], [0.02, 0.02, 0.03], [0.5, 0.5, 0.5], [0.52, 0.51, 0.5]]
    c = voxel_downsample(_cloud(pts, [0, 1, 2, 3]), 0.1)
    assert len(c) == 2
    assert np.allclose(sorted(c.points[:, 0]), [0.015, 0.51])
    assert sorted(c.frame.tolist()) == [0, 2]


def test_empty_static_cloud_rejected():
    masks, frames = _frames_with_masks([1])
    with pytest.raises(ConfigError):
        select_reference_and_fuse(LabeledCloud.empty(), LabeledCloud.empty(), masks, frames, [0])
