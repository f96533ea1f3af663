"""Parameter groups, gradients, the Adam update and the two-phase training loop."""
from __future__ import annotations

import logging
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, NumericalFailure
from .flowrender import scene_flow_pipeline
from .geometry import DTYPE, Camera
from .model import DEFORMATION_GROUPS, GROUPS, SceneModel
from .splat import render
from .warploss import LossBreakdown, LossWeights, total_loss

log = logging.getLogger(__name__)

DEFAULT_LR = {
    "gaussian_means": 1.6e-4,
    "gaussian_rotations": 1e-3,
    "gaussian_scales": 5e-3,
    "gaussian_opacities": 5e-2,
    "gaussian_colors": 2.5e-3,
    "spatial_planes": 1.6e-3,
    "temporal_planes": 1.6e-3,
    "static_decoder": 1.6e-3,
    "dynamic_decoder": 1.6e-3,
}
# learning rate at the last step as a fraction of the initial one (log-linear decay)
DEFAULT_LR_FINAL = {
    "gaussian_means": 0.01,
    "spatial_planes": 0.1,
    "temporal_planes": 0.1,
    "static_decoder": 0.1,
    "dynamic_decoder": 0.1,
}


class ParamSet(Mapping):
    """Named tensors, one per group, each with its own learning rate."""

    def __init__(self, groups: dict[str, torch.Tensor], lrs: dict[str, float] | None = None):
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
        self.groups = {k: groups[k].detach().clone().to(DTYPE) for k in GROUPS if k in groups}
        lrs = dict(DEFAULT_LR, **(lrs or {}))
        self.lrs = {k: float(lrs[k]) for k in self.groups}

    def __getitem__(self, k: str) -> torch.Tensor:
        return self.groups[k]

    def __iter__(self) -> Iterator[str]:
        return iter(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def flat(self) -> torch.Tensor:
        return torch.cat([v.reshape(-1) for v in self.groups.values()])

    def n_scalars(self) -> int:
        return sum(v.numel() for v in self.groups.values())

    def live(self, frozen=()) -> list[str]:
        return [k for k in self.groups if k not in frozen]

    def clone(self) -> "ParamSet":
        return ParamSet({k: v.clone() for k, v in self.groups.items()}, self.lrs)


def gradient(loss_fn: Callable[[], torch.Tensor], params: ParamSet, frozen=()):
    """Reverse-mode gradient of ``loss_fn()`` for every live group.

    Frozen groups and groups the loss does not touch get exact zeros.
    """
    live = params.live(frozen)
    for k in params:
        params.groups[k].requires_grad_(k in live)
    try:
        loss = loss_fn()
        value = loss.total if isinstance(loss, LossBreakdown) else loss
        if not bool(torch.isfinite(value)):
            raise NumericalFailure("total", "loss is not finite")
        tensors = [params[k] for k in live]
        gs = torch.autograd.grad(value, tensors, allow_unused=True) if value.requires_grad else [None] * len(live)
    finally:
        for k in params:
            params.groups[k].requires_grad_(False)
    grads = {k: torch.zeros_like(v) for k, v in params.items()}
    for k, g in zip(live, gs):
        if g is not None:
            if not bool(torch.isfinite(g).all()):
                raise NumericalFailure(k, f"non-finite gradient in group {k}")
            grads[k] = g
    return loss, grads


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


BETA1, BETA2, EPS = 0.9, 0.999, 1e-15


def adam_step(params: ParamSet, grads: Mapping[str, torch.Tensor], state: AdamState, frozen=(), row_masks=None,
              lr_scale: Mapping[str, float] | None = None):
    """In-place bias-corrected Adam update of every non-frozen group.

    ``row_masks`` optionally maps a group to a boolean row mask; unmasked rows
    keep both their values and their moments.  ``lr_scale`` multiplies the
    learning rate of the listed groups for this step.
    """
    state.step += 1
    t = state.step
    c1 = 1 - BETA1**t
    c2 = 1 - BETA2**t
    with torch.no_grad():
        for k, p in params.items():
            if k in frozen:
                continue
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} does not match {k} {tuple(p.shape)}")
            m = state.m.setdefault(k, torch.zeros_like(p))
            v = state.v.setdefault(k, torch.zeros_like(p))
            m_new = BETA1 * m + (1 - BETA1) * g
            v_new = BETA2 * v + (1 - BETA2) * g * g
            lr = params.lrs[k] * (1.0 if lr_scale is None else lr_scale.get(k, 1.0))
            upd = lr * (m_new / c1) / (torch.sqrt(v_new / c2) + EPS)
            rows = None if row_masks is None else row_masks.get(k)
            if rows is not None:
                sel = rows.reshape(-1, *([1] * (p.ndim - 1)))
                m_new = torch.where(sel, m_new, m)
                v_new = torch.where(sel, v_new, v)
                upd = torch.where(sel, upd, torch.zeros_like(upd))
            m.copy_(m_new)
            v.copy_(v_new)
            p.sub_(upd)
        if "gaussian_rotations" in params and "gaussian_rotations" not in frozen:
            q = params["gaussian_rotations"]
            q.div_(torch.linalg.norm(q, dim=-1, keepdim=True))
    return state


@dataclass
class Schedule:
    """Coarse phase (deformation frozen) for the first ``warmup_steps``, then fine."""

    warmup_steps: int
    total_steps: int
    coarse_frozen: tuple[str, ...] = DEFORMATION_GROUPS
    fine_frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must be in [0, total_steps)")

    @classmethod
    def default(cls, total_steps: int, warmup_frac: float = 0.1) -> "Schedule":
        return cls(int(round(warmup_frac * total_steps)), total_steps)

    def phase(self, step: int) -> str:
        return "coarse" if step < self.warmup_steps else "fine"

    def frozen(self, step: int) -> tuple[str, ...]:
        return self.coarse_frozen if self.phase(step) == "coarse" else self.fine_frozen


def lr_factors(step: int, total: int, final: Mapping[str, float]) -> dict[str, float]:
    """Log-linear decay from 1 at step 0 to ``final[k]`` at the last step."""
    s = step / max(total - 1, 1)
    return {k: float(f) ** s for k, f in final.items()}


# --------------------------------------------------------------------------- training


@dataclass
class Dataset:
    """Frames ``(N, H, W, 3)``, cameras with timestamps, dynamic masks, training subset."""

    images: torch.Tensor
    cameras: list[Camera]
    dynamic_masks: torch.Tensor
    train_ids: list[int]

    def __post_init__(self):
        if len(self.train_ids) < 2:
            raise ConfigError("training needs at least two frames")

    def pairs(self, stride: int = 1) -> list[tuple[int, int]]:
        ids = self.train_ids
        return [(ids[i], ids[i + stride]) for i in range(len(ids) - stride)]


def held_out(n_frames: int, every: int = 8, offset: int = 4) -> list[int]:
    return [i for i in range(n_frames) if i % every == offset % every]


@dataclass
class TrainConfig:
    steps: int = 7000
    warmup_frac: float = 0.1
    seed: int = 0
    stride: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_interval: int = 0
    lr_final: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LR_FINAL))


@dataclass
class TrainResult:
    params: ParamSet
    rows: list[list[float]]
    state: AdamState


def step_loss(model: SceneModel, data: Dataset, a: int, b: int, weights: LossWeights, phase: str) -> LossBreakdown:
    """Loss for one ordered frame pair; the coarse phase fits static pixels only."""
    i1, i2 = data.images[a], data.images[b]
    static1 = ~data.dynamic_masks[a]
    coarse = phase == "coarse"
    need_full = not coarse and weights.lambda_ff > 0
    need_cam = weights.lambda_cf > 0
    smooth = model.smoothness()
    static = model.static_gaussians()
    if need_full or need_cam:
        f_full, f_cam, r1 = scene_flow_pipeline(model, data.cameras[a], data.cameras[b], static)
    else:
        f_full = f_cam = None
        r1 = render(model.gaussians_at(data.cameras[a].timestamp, static), data.cameras[a])
    base_mask = static1 if coarse and bool(static1.any()) else None
    return total_loss(
        i1, r1, smooth, weights, i2, f_full, f_cam, static1,
        use_full=need_full, use_cam=need_cam, baseline_mask=base_mask,
    )


def train(
    params: ParamSet,
    model_factory: Callable[[ParamSet], SceneModel],
    data: Dataset,
    cfg: TrainConfig,
    on_checkpoint: Callable[[int, ParamSet, AdamState], None] | None = None,
    on_step: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Optimize ``params`` in place over random ordered training pairs.

    Pair sampling uses a dedicated generator seeded from ``cfg.seed``; the
    run is a deterministic function of (params, data, cfg).  A non-finite loss
    or gradient aborts before the update: the untouched parameters go to
    ``on_checkpoint`` as the last good state, and the raised error carries the
    rows logged so far in ``rows``.
    """
    sched = Schedule.default(cfg.steps, cfg.warmup_frac)
    model = model_factory(params)
    pairs = data.pairs(cfg.stride)
    if not pairs:
        raise ConfigError("stride leaves no training pairs")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    rows: list[list[float]] = []
    static_rows = ~model.is_dynamic
    gauss = [k for k in params if k.startswith("gaussian_")]
    for step in range(cfg.steps):
        phase = sched.phase(step)
        frozen = sched.frozen(step)
        k = int(rng.integers(len(pairs)))
        a, b = pairs[k]
        if rng.random() < 0.5:
            a, b = b, a
        try:
            loss, grads = gradient(lambda: step_loss(model, data, a, b, cfg.weights, phase), params, frozen)
        except NumericalFailure as err:
            log.error("step %d: %s", step, err)
            if on_checkpoint is not None:
                on_checkpoint(step, params, state)
            err.rows = rows
            raise
        masks = {g: static_rows for g in gauss} if phase == "coarse" else None
        adam_step(params, grads, state, frozen, masks, lr_factors(step, cfg.steps, cfg.lr_final))
        rows.append([step] + loss.row())
        if on_step is not None:
            on_step(step, loss)
        if on_checkpoint is not None and cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
            on_checkpoint(step + 1, params, state)
    return TrainResult(params, rows, state)
