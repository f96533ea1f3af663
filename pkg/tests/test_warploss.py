import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsplat.errors import ConfigError, EmptySupportError, NumericalFailure
from flowsplat.flowrender import FlowField, camera_flow
from flowsplat.geometry import DTYPE, Pose
from flowsplat.harness import generate, preset
from flowsplat.warploss import (
    LossWeights,
    camera_flow_losses,
    full_flow_losses,
    photometric,
    ssim_map,
    total_loss,
    warp,
)
from oracles import reference_ssim_map, reference_warp


def image(rng, h=16, w=20):
    return torch.tensor(rng.uniform(size=(h, w, 3)), dtype=DTYPE)


def constant_flow(h, w, du, dv):
    f = torch.zeros(h, w, 2, dtype=DTYPE)
    f[..., 0], f[..., 1] = du, dv
    return FlowField(f, torch.ones(h, w, dtype=torch.bool))


@pytest.fixture(scope="module")
def sphere_scene():
    return generate(preset("moving-sphere"))


@pytest.fixture(scope="module")
def static_scene():
    return generate(preset("static-only"))


def gt_flow(gt, i):
    return FlowField(torch.from_numpy(gt.flows[i]), torch.from_numpy(gt.flow_valid[i]))


def as_render(img):
    return SimpleNamespace(color=torch.as_tensor(img, dtype=DTYPE))


# --------------------------------------------------------------------------- warp


def test_zero_flow_is_identity(rng):
    img = image(rng)
    out, cov = warp(img, constant_flow(16, 20, 0.0, 0.0))
    assert torch.equal(out, img) and cov.all()


def test_integer_shift(rng):
    img = image(rng)
    out, cov = warp(img, constant_flow(16, 20, 1.0, 0.0))
    assert torch.equal(out[:, :-1], img[:, 1:])
    assert not cov[:, -1].any() and cov[:, :-1].all()


def test_matches_bilinear_oracle(rng):
    img = image(rng)
    flow = torch.tensor(rng.normal(size=(16, 20, 2)) * 3, dtype=DTYPE)
    valid = torch.tensor(rng.uniform(size=(16, 20)) > 0.2)
    out, cov = warp(img, FlowField(flow, valid))
    f = FlowField(flow, valid).flow.numpy()
    ref, ref_cov = reference_warp(img.numpy(), f[..., 0], f[..., 1], valid.numpy())
    assert np.array_equal(cov.numpy(), ref_cov)
    assert np.abs(out.numpy() - ref).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_warp_is_linear_in_target(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    a, b = image(rng), image(rng)
    f = FlowField(torch.tensor(rng.normal(size=(16, 20, 2)) * 2, dtype=DTYPE), torch.ones(16, 20, dtype=torch.bool))
    lhs = warp(alpha * a + beta * b, f)[0]
    rhs = alpha * warp(a, f)[0] + beta * warp(b, f)[0]
    assert (lhs - rhs).abs().max().item() < 1e-12


def test_warp_size_mismatch(rng):
    with pytest.raises(ValueError):
        warp(image(rng), constant_flow(8, 8, 0, 0))


# --------------------------------------------------------------------------- photometric


def test_photometric_identical_is_zero(rng):
    a = image(rng)
    assert photometric(a, a.clone()).item() == 0.0


def test_ssim_identical_is_one(rng):
    a = image(rng)
    assert torch.all(ssim_map(a, a.clone()) == 1.0)


def test_ssim_matches_reference():
    v, u = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    a = np.stack([0.5 + 0.4 * np.sin(u / 3.0), 0.5 + 0.4 * np.cos(v / 4.0), ((u // 4 + v // 4) % 2) * 0.8 + 0.1], -1)
    b = np.stack([0.5 + 0.35 * np.sin(u / 3.0 + 0.4), 0.45 + 0.4 * np.cos(v / 5.0), ((u // 5 + v // 3) % 2) * 0.7], -1)
    ref = np.mean([reference_ssim_map(a[..., c], b[..., c]) for c in range(3)], 0)
    got = ssim_map(torch.from_numpy(a), torch.from_numpy(b)).numpy()
    assert np.abs(got - ref).max() < 1e-6


def test_photometric_mask_and_empty(rng):
    a, b = image(rng), image(rng)
    m = torch.zeros(16, 20, dtype=torch.bool)
    m[3:9, 4:12] = True
    l1 = photometric(a, b, m, lambda_dssim=0.0)
    assert abs(l1.item() - (a - b).abs()[m].mean().item()) < 1e-15
    with pytest.raises(EmptySupportError):
        photometric(a, b, torch.zeros(16, 20, dtype=torch.bool))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_photometric_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = image(rng), image(rng)
    assert abs(photometric(a, b, lambda_dssim=0.0) - photometric(b, a, lambda_dssim=0.0)).item() < 1e-12
    assert (ssim_map(a, b) - ssim_map(b, a)).abs().max().item() < 1e-9


# --------------------------------------------------------------------------- flow losses


def test_ground_truth_flow_near_noise_floor(sphere_scene):
    gt = sphere_scene
    for i in range(len(gt.flows)):
        i1 = torch.from_numpy(gt.frames[i].image)
        i2 = torch.from_numpy(gt.frames[i + 1].image)
        l_mc, l_cr = full_flow_losses(i1, i2, as_render(i1), gt_flow(gt, i))
        assert l_mc.item() < 0.01
        assert l_mc.item() == l_cr.item()


def test_zero_flow_static_identical_frames():
    gt = generate(preset("static-only", n_frames=2, camera=dataclasses.replace(preset("static-only").camera,
                                                                               angle_end=-0.15)))
    i1 = torch.from_numpy(gt.frames[0].image)
    i2 = torch.from_numpy(gt.frames[1].image)
    assert torch.equal(i1, i2)
    l_mc, _ = full_flow_losses(i1, i2, as_render(i1), constant_flow(32, 32, 0.0, 0.0))
    assert l_mc.item() == 0.0


def test_perturbed_flow_increases_motion_consistency(sphere_scene):
    gt = sphere_scene
    i1 = torch.from_numpy(gt.frames[2].image)
    i2 = torch.from_numpy(gt.frames[3].image)
    f = gt_flow(gt, 2)
    good = full_flow_losses(i1, i2, as_render(i1), f)[0]
    bad_flow = FlowField(f.flow + 2.0, f.valid)
    bad = full_flow_losses(i1, i2, as_render(i1), bad_flow)[0]
    assert bad.item() > good.item()


def test_camera_flow_losses_fully_dynamic_mask(static_scene):
    gt = static_scene
    i1 = torch.from_numpy(gt.frames[0].image)
    i2 = torch.from_numpy(gt.frames[1].image)
    f = constant_flow(32, 32, 0.0, 0.0)
    l1, l2, empty = camera_flow_losses(i1, i2, as_render(i1), f, torch.zeros(32, 32, dtype=torch.bool))
    assert empty and l1.item() == 0.0 and l2.item() == 0.0


def _cam_loss(gt, i, cam2):
    f1 = gt.frames[i]
    depth = torch.from_numpy(f1.depth)
    fc = camera_flow(depth, torch.from_numpy(f1.ids >= 0), f1.camera, cam2)
    i1 = torch.from_numpy(f1.image)
    i2 = torch.from_numpy(gt.frames[i + 1].image)
    return camera_flow_losses(i1, i2, as_render(i1), fc, torch.from_numpy(~f1.mask))[0]


def test_camera_flow_loss_exact_cameras(static_scene):
    gt = static_scene
    for i in range(len(gt.frames) - 1):
        assert _cam_loss(gt, i, gt.frames[i + 1].camera).item() < 0.01


def test_corrupted_translation_increases_camera_loss(static_scene):
    gt = static_scene
    cam2 = gt.frames[2].camera
    exact = _cam_loss(gt, 1, cam2)
    t = cam2.pose.translation
    bad = cam2.with_pose(Pose(cam2.pose.rotation, t * 1.05))
    assert _cam_loss(gt, 1, bad).item() > exact.item()


# --------------------------------------------------------------------------- objective


def test_zero_flow_weights_reduce_to_baseline(rng):
    a, b = image(rng), image(rng)
    w = LossWeights(lambda_ff=0.0, lambda_cf=0.0)
    out = total_loss(a, as_render(b), torch.tensor(0.3, dtype=DTYPE), w)
    assert out.total.item() == out.L_baseline.item()
    assert out.L_mc.item() == 0.0 and out.L_mc_cam.item() == 0.0


def test_presets():
    s = LossWeights.preset("simple")
    assert (s.lambda_ff, s.lambda_cf) == (5.0, 0.3)
    c = LossWeights.preset("complex")
    assert (c.lambda_ff, c.lambda_cf) == (1.0, 0.1)
    for w in (s, c):
        assert w.lambda_cr == pytest.approx(0.1 * w.lambda_mc)
        assert w.lambda_cr_cam == pytest.approx(0.1 * w.lambda_mc_cam)
    with pytest.raises(ConfigError):
        LossWeights.preset("medium")
    with pytest.raises(ConfigError):
        LossWeights(lambda_ff=-1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_total_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b, r = image(rng, 12, 12), image(rng, 12, 12), image(rng, 12, 12)
    ff = FlowField(torch.tensor(rng.normal(size=(12, 12, 2)), dtype=DTYPE), torch.ones(12, 12, dtype=torch.bool))
    fc = FlowField(torch.tensor(rng.normal(size=(12, 12, 2)), dtype=DTYPE), torch.ones(12, 12, dtype=torch.bool))
    mask = torch.tensor(rng.uniform(size=(12, 12)) > 0.3)
    out = total_loss(a, as_render(r), torch.tensor(0.1, dtype=DTYPE), LossWeights(), b, ff, fc, mask)
    assert all(v >= 0 for v in out.row())


def test_total_loss_non_finite_raises(rng):
    a = image(rng)
    with pytest.raises(NumericalFailure):
        total_loss(a, as_render(a), torch.tensor(float("nan"), dtype=DTYPE), LossWeights(lambda_ff=0, lambda_cf=0))
