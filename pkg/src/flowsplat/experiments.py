"""Experiment drivers shared by the acceptance suite and ``scripts/``.

Each driver takes a generated harness scene and returns plain numbers, so
the callers only decide thresholds and printing.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .canonical import AlignConfig, coarse_align, fine_align, plan_clips, pose_errors, scene_diameter
from .harness import GroundTruth, HarnessOracle
from .optim import TrainConfig, held_out
from .pipeline import Evaluation, InitConfig, Initialization, aligned_cameras, build_model, dataset, evaluate, initialize, train_model
from .warploss import LossWeights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationRun:
    name: str
    lambda_ff: float
    lambda_cf: float


# baseline, + full flow, + full and camera flow, all at the simple-scene regime
DEFAULT_RUNS = (
    AblationRun("baseline", 0.0, 0.0),
    AblationRun("full_flow", 5.0, 0.0),
    AblationRun("full_camera_flow", 5.0, 0.3),
)


@dataclass
class RunResult:
    run: AblationRun
    evaluation: Evaluation
    seconds: float
    final_loss: float


def true_diameter(gt: GroundTruth) -> float:
    return scene_diameter(np.concatenate([f.points[f.ids >= 0] for f in gt.frames]))


def alignment_errors(gt: GroundTruth, clip_len: int = 25, noise: float = 0.0, seed: int = 0,
                     cfg: AlignConfig | None = None):
    """Per-frame rotation (deg) and translation (fraction of the scene diameter) errors."""
    masks = [f.mask for f in gt.frames]
    oracle = HarnessOracle(gt, noise=noise, seed=seed)
    plan = plan_clips(len(gt.frames), clip_len)
    coarse = coarse_align(plan, oracle, masks=masks, cfg=cfg)
    state = fine_align(plan, oracle, coarse, masks=masks, cfg=cfg)
    return pose_errors(state.poses, [c.pose for c in gt.cameras], true_diameter(gt))


def ablation(gt: GroundTruth, runs=DEFAULT_RUNS, steps: int = 7000, seed: int = 0,
             init_cfg: InitConfig | None = None, init: Initialization | None = None,
             weights: LossWeights | None = None) -> dict[str, RunResult]:
    """Train every run from one shared initialization and evaluate on held-out frames.

    Only the flow weights differ between runs; model seed, pair order and
    all other settings are identical.
    """
    init = init or initialize(gt, init_cfg)
    cams = aligned_cameras(init.state, [f.camera.timestamp for f in gt.frames])
    images = [f.image for f in gt.frames]
    masks = [f.mask for f in gt.frames]
    data = dataset(images, masks, cams)
    test = held_out(len(gt.frames))
    base = weights or LossWeights.preset("simple")
    out = {}
    for run in runs:
        setup = build_model(init.static, init.dynamic, seed=seed)
        w = replace(base, lambda_ff=run.lambda_ff, lambda_cf=run.lambda_cf)
        t0 = time.perf_counter()
        res = train_model(setup, data, TrainConfig(steps=steps, seed=seed, weights=w))
        secs = time.perf_counter() - t0
        ev = evaluate(setup.model(res.params), images, masks, cams, test, gt.flows, gt.flow_valid)
        log.info("%s: psnr %.3f static %.3f epe dyn %.3f static %.3f cam %.4f (%.0f s)", run.name, ev.psnr,
                 ev.psnr_static, ev.epe_dynamic, ev.epe_static, ev.epe_cam_static, secs)
        out[run.name] = RunResult(run, ev, secs, float(res.rows[-1][-1]))
    return out
