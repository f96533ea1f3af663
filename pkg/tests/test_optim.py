import math

import numpy as np
import pytest
import torch

import gradcases
from flowsplat.errors import ConfigError, NumericalFailure
from flowsplat.geometry import DTYPE
from flowsplat.model import DEFORMATION_GROUPS
from flowsplat.optim import (
    BETA1,
    BETA2,
    AdamState,
    Dataset,
    ParamSet,
    Schedule,
    TrainConfig,
    adam_step,
    gradient,
    held_out,
    lr_factors,
    train,
)
from flowsplat.warploss import LossWeights


def quadratic_params(x0):
    return ParamSet({"gaussian_means": torch.tensor(x0, dtype=DTYPE)}, {"gaussian_means": 0.05})


# --------------------------------------------------------------------------- gradient


def test_untouched_group_gets_exact_zero():
    p = ParamSet({"gaussian_means": torch.ones(3, 3, dtype=DTYPE), "gaussian_colors": torch.ones(3, 3, dtype=DTYPE)})
    _, g = gradient(lambda: (p["gaussian_means"] ** 2).sum(), p)
    assert torch.equal(g["gaussian_colors"], torch.zeros(3, 3, dtype=DTYPE))
    assert torch.equal(g["gaussian_means"], 2 * torch.ones(3, 3, dtype=DTYPE))
    assert not p["gaussian_means"].requires_grad


def test_frozen_group_gets_zero():
    p = ParamSet({"gaussian_means": torch.ones(2, 3, dtype=DTYPE)})
    _, g = gradient(lambda: p["gaussian_means"].sum(), p, frozen=("gaussian_means",))
    assert g["gaussian_means"].abs().sum().item() == 0.0


def test_non_finite_gradient_names_group():
    p = ParamSet({"gaussian_means": torch.zeros(2, dtype=DTYPE), "gaussian_scales": torch.ones(2, dtype=DTYPE)})
    with pytest.raises(NumericalFailure) as e:
        gradient(lambda: torch.sqrt(p["gaussian_means"]).sum() * 0 + p["gaussian_scales"].sum(), p)
    assert e.value.term == "gaussian_means"


def test_non_finite_loss_raises():
    p = ParamSet({"gaussian_means": torch.zeros(2, dtype=DTYPE)})
    with pytest.raises(NumericalFailure):
        gradient(lambda: (p["gaussian_means"] / 0.0).sum(), p)


def test_unknown_group_rejected():
    with pytest.raises(ConfigError):
        ParamSet({"weights": torch.zeros(2)})


@pytest.mark.parametrize("name", sorted(gradcases.CASES))
def test_primitive_vjp(name):
    for seed in range(2):
        assert gradcases.primitive_error(name, seed) < 1e-3


def test_end_to_end_gradient():
    assert gradcases.end_to_end_error(0) < 5e-3


# --------------------------------------------------------------------------- adam


def test_zero_gradient_keeps_params():
    p = quadratic_params([1.0, -2.0])
    st = AdamState()
    adam_step(p, {"gaussian_means": torch.zeros(2, dtype=DTYPE)}, st)
    assert torch.equal(p["gaussian_means"], torch.tensor([1.0, -2.0], dtype=DTYPE))
    assert st.step == 1


def test_zero_gradient_decays_moments():
    p = quadratic_params([1.0, -2.0])
    st = AdamState()
    adam_step(p, {"gaussian_means": torch.tensor([0.5, -0.5], dtype=DTYPE)}, st)
    m, v = st.m["gaussian_means"].clone(), st.v["gaussian_means"].clone()
    adam_step(p, {"gaussian_means": torch.zeros(2, dtype=DTYPE)}, st)
    assert torch.equal(st.m["gaussian_means"], BETA1 * m)
    assert torch.equal(st.v["gaussian_means"], BETA2 * v)


def test_constant_gradient_unit_step():
    p = quadratic_params([0.0, 0.0, 0.0])
    g = torch.tensor([3.0, -0.01, 250.0], dtype=DTYPE)
    st = AdamState()
    for _ in range(500):
        prev = p["gaussian_means"].clone()
        adam_step(p, {"gaussian_means": g}, st)
    step = p["gaussian_means"] - prev
    assert torch.allclose(step, -0.05 * torch.sign(g), rtol=1e-6)


def test_quadratic_converges():
    target = torch.tensor([0.3, -1.2, 2.0, 0.0], dtype=DTYPE)
    scale = torch.tensor([1.0, 10.0, 0.1, 3.0], dtype=DTYPE)
    p = quadratic_params([2.0, 2.0, -2.0, 1.0])
    st = AdamState()
    for _ in range(2000):
        x = p["gaussian_means"]
        adam_step(p, {"gaussian_means": 2 * scale * (x - target)}, st)
    assert (p["gaussian_means"] - target).abs().max().item() < 1e-6


def test_quaternions_renormalized():
    p = ParamSet({"gaussian_rotations": torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=DTYPE)})
    adam_step(p, {"gaussian_rotations": torch.tensor([[0.0, -5.0, 1.0, 0.0]], dtype=DTYPE)}, AdamState())
    assert abs(torch.linalg.norm(p["gaussian_rotations"]).item() - 1.0) < 1e-15


def test_row_mask_freezes_rows():
    p = quadratic_params([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
    st = AdamState()
    adam_step(p, {"gaussian_means": torch.ones(2, 3, dtype=DTYPE)}, st,
              row_masks={"gaussian_means": torch.tensor([True, False])})
    assert torch.equal(p["gaussian_means"][1], torch.full((3,), 2.0, dtype=DTYPE))
    assert st.m["gaussian_means"][1].abs().sum().item() == 0.0
    assert p["gaussian_means"][0, 0].item() < 1.0


def test_shape_mismatch_raises():
    p = quadratic_params([1.0, 2.0])
    with pytest.raises(ValueError):
        adam_step(p, {"gaussian_means": torch.zeros(3, dtype=DTYPE)}, AdamState())


# --------------------------------------------------------------------------- schedule


def test_schedule_phases():
    s = Schedule.default(100, 0.1)
    assert s.warmup_steps == 10
    assert s.phase(9) == "coarse" and s.phase(10) == "fine"
    assert set(s.frozen(0)) == set(DEFORMATION_GROUPS) and s.frozen(50) == ()
    with pytest.raises(ConfigError):
        Schedule(100, 100)


def test_lr_factors_endpoints():
    f = lr_factors(0, 100, {"gaussian_means": 0.01})
    assert f["gaussian_means"] == 1.0
    f = lr_factors(99, 100, {"gaussian_means": 0.01})
    assert math.isclose(f["gaussian_means"], 0.01, rel_tol=1e-12)
    mid = lr_factors(50, 101, {"gaussian_means": 0.01})["gaussian_means"]
    assert math.isclose(mid, 0.1, rel_tol=1e-12)


def test_held_out_every_eighth():
    assert held_out(20) == [4, 12]
    assert held_out(20, 8, 0) == [0, 8, 16]


# --------------------------------------------------------------------------- training


def _run(steps=12, seed=0, **kw):
    params, factory, data = gradcases.tiny_problem(0)
    cfg = TrainConfig(steps=steps, warmup_frac=0.5, seed=seed, weights=LossWeights(), **kw)
    return params, train(params, factory, data, cfg)


def test_coarse_phase_freezes_deformation():
    params, factory, data = gradcases.tiny_problem(0)
    init = {k: params[k].clone() for k in params}
    snap = {}

    def on_step(step, loss):
        if step == 5:
            snap.update({k: params[k].clone() for k in params})

    train(params, factory, data, TrainConfig(steps=12, warmup_frac=0.5, seed=0), on_step=on_step)
    for k in DEFORMATION_GROUPS:
        assert torch.equal(snap[k], init[k])
        assert not torch.equal(params[k], init[k])
    # dynamic rows of the explicit Gaussians are frozen too
    n_static = 2
    assert torch.equal(snap["gaussian_means"][n_static:], init["gaussian_means"][n_static:])
    assert not torch.equal(snap["gaussian_means"][:n_static], init["gaussian_means"][:n_static])


def test_training_is_deterministic():
    p1, r1 = _run()
    p2, r2 = _run()
    assert r1.rows == r2.rows
    for k in p1:
        assert torch.equal(p1[k], p2[k])
    _, r3 = _run(seed=1)
    assert r3.rows != r1.rows


def test_checkpoint_interval():
    params, factory, data = gradcases.tiny_problem(0)
    seen = []
    train(params, factory, data, TrainConfig(steps=6, checkpoint_interval=2),
          on_checkpoint=lambda s, p, st: seen.append(s))
    assert seen == [2, 4, 6]


def test_non_finite_loss_keeps_last_good_state():
    params, factory, data = gradcases.tiny_problem(0)
    images = torch.cat([data.images, torch.full((1, 16, 16, 3), float("nan"), dtype=DTYPE)])
    masks = torch.cat([data.dynamic_masks, data.dynamic_masks[:1]])
    bad = Dataset(images, data.cameras + [data.cameras[1]], masks, [0, 1, 2])
    saved = {}

    def on_ckpt(step, p, st):
        saved["step"] = step
        saved["params"] = {k: p[k].clone() for k in p}

    with pytest.raises(NumericalFailure) as e:
        train(params, factory, bad, TrainConfig(steps=50, seed=0), on_checkpoint=on_ckpt)
    assert saved["step"] == len(e.value.rows)
    for k, v in saved["params"].items():
        assert torch.isfinite(v).all()
        assert torch.equal(v, params[k])


def test_dataset_validation():
    params, factory, data = gradcases.tiny_problem(0)
    with pytest.raises(ConfigError):
        Dataset(data.images, data.cameras, data.dynamic_masks, [0])
    assert data.pairs() == [(0, 1)]
    assert data.pairs(2) == []
    with pytest.raises(ConfigError):
        train(params, factory, data, TrainConfig(steps=3, stride=2))
