"""Canonical-space construction from pairwise point maps.

The video is cut into clips whose first frames are keyframes.  Keyframes are
aligned globally (coarse), then every clip's remaining frames are aligned with
its keyframe held fixed (fine).  The aligned depth maps are back-projected
into static and dynamic clouds, and the clouds that seed training are chosen
from a reference frame plus the keyframes.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch

from .errors import AlignmentFailure, ConfigError
from .geometry import (
    DTYPE,
    Camera,
    Intrinsics,
    Pose,
    back_project,
    compose,
    interpolate_pose,
    invert,
    pixel_grid,
    rotation_angle,
    se3_log,
    so3_exp,
)

log = logging.getLogger(__name__)

CONF_THRESHOLD = 0.5
SMOOTH_WEIGHT = 0.01
CONSISTENCY_WEIGHT = 1.0
# per-pixel residuals below this fraction of the median depth never count as divergence
DIVERGENCE_FLOOR = 0.01


class PointMapOracle(Protocol):
    def point_maps(self, a: int, b: int): ...

    def intrinsics(self, i: int) -> Intrinsics: ...

    def __len__(self) -> int: ...


# --------------------------------------------------------------------------- clip planning


@dataclass
class ClipPlan:
    clips: list[range]
    keyframes: list[int]
    graph_edges: list[tuple[int, int]]  # pairs of positions in ``keyframes``

    @property
    def n_frames(self) -> int:
        return self.clips[-1].stop if self.clips else 0

    def clip_of(self, i: int) -> int:
        for k, c in enumerate(self.clips):
            if i in c:
                return k
        raise IndexError(i)


def keyframe_graph(n: int) -> list[tuple[int, int]]:
    """Complete graph up to 12 keyframes, else a chain plus an edge from every third keyframe."""
    if n <= 12:
        return [(a, b) for a in range(n) for b in range(a + 1, n)]
    edges = [(k, k + 1) for k in range(n - 1)]
    edges += [(k, k + 3) for k in range(0, n - 3, 3)]
    return sorted(set(edges))


def plan_clips(n_frames: int, clip_len: int = 25) -> ClipPlan:
    """Consecutive clips of ``clip_len`` frames; the last clip holds the remainder.

    A clip length above ``n_frames`` yields a single clip.
    """
    if n_frames < 1:
        raise ConfigError("need at least one frame")
    if clip_len < 2:
        raise ConfigError("clip_len must be at least 2")
    clips = [range(s, min(s + clip_len, n_frames)) for s in range(0, n_frames, clip_len)]
    keys = [c.start for c in clips]
    return ClipPlan(clips, keys, keyframe_graph(len(keys)))


# --------------------------------------------------------------------------- alignment state


@dataclass
class AlignmentState:
    """Per-frame poses, depth maps and confidences with a shared focal length."""

    poses: list[Pose]
    intrinsics: list[Intrinsics]
    depths: torch.Tensor  # (N, H, W), 0 where undefined
    confidence: torch.Tensor  # (N, H, W)
    fixed: list[bool]
    frames: list[int]  # sequence index of each entry

    def index(self, frame: int) -> int:
        return self.frames.index(frame)

    def camera(self, frame: int, timestamp: float = 0.0) -> Camera:
        k = self.index(frame)
        return Camera(self.intrinsics[k], self.poses[k], timestamp)

    def subset(self, frames: list[int]) -> "AlignmentState":
        ids = [self.index(f) for f in frames]
        return AlignmentState(
            [self.poses[i] for i in ids],
            [self.intrinsics[i] for i in ids],
            self.depths[ids].clone(),
            self.confidence[ids].clone(),
            [self.fixed[i] for i in ids],
            list(frames),
        )


@dataclass
class _Maps:
    """Cached oracle outputs for one ordered pair."""

    x_aa: torch.Tensor
    x_ab: torch.Tensor
    c_aa: torch.Tensor
    c_ab: torch.Tensor


class _MapCache:
    def __init__(self, oracle: PointMapOracle):
        self.oracle = oracle
        self.cache: dict[tuple[int, int], _Maps] = {}

    def __call__(self, a: int, b: int) -> _Maps:
        if (a, b) not in self.cache:
            p = self.oracle.point_maps(a, b)
            as_t = lambda x: torch.as_tensor(x, dtype=DTYPE)
            self.cache[(a, b)] = _Maps(as_t(p.X_aa), as_t(p.X_ab), as_t(p.C_aa), as_t(p.C_ab))
        return self.cache[(a, b)]


def estimate_focal(x: torch.Tensor, conf: torch.Tensor, cx: float, cy: float) -> float:
    """Least-squares focal from a camera-frame point map ``(H, W, 3)``."""
    h, w = x.shape[:2]
    g = pixel_grid(w, h)
    m = (conf > 0) & (x[..., 2] > 0)
    if not bool(m.any()):
        raise AlignmentFailure("no confident points to estimate the focal length")
    xr = (x[..., 0] / x[..., 2])[m]
    yr = (x[..., 1] / x[..., 2])[m]
    du = (g[..., 0] - cx)[m]
    dv = (g[..., 1] - cy)[m]
    num = (xr * du).sum() + (yr * dv).sum()
    den = (xr * xr).sum() + (yr * yr).sum()
    return float(num / den)


# --------------------------------------------------------------------------- loss terms


def batched_weighted_median(values: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Row-wise lower weighted median of ``(P, M)`` values; rows without weight give 1."""
    order = torch.argsort(values, dim=1, stable=True)
    v = values.gather(1, order)
    c = torch.cumsum(weights.gather(1, order), 1)
    total = c[:, -1:]
    k = torch.searchsorted(c.contiguous(), (total / 2).contiguous()).clamp(max=v.shape[1] - 1)
    med = v.gather(1, k)[:, 0]
    return torch.where(total[:, 0] > 0, med, torch.ones_like(med))


def weighted_median(values: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return batched_weighted_median(values[None], weights[None])[0]


def _camera_points(depths: torch.Tensor, focal, cx: torch.Tensor, cy: torch.Tensor) -> torch.Tensor:
    """``(N, H, W)`` depths to camera-frame points ``(N, H*W, 3)``."""
    n, h, w = depths.shape
    g = pixel_grid(w, h)
    x = (g[..., 0] - cx[:, None, None]) / focal * depths
    y = (g[..., 1] - cy[:, None, None]) / focal * depths
    return torch.stack([x, y, depths], -1).reshape(n, h * w, 3)


def _pair_scales(u: torch.Tensor, v: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Per pair ``argmin_s sum c |s u - v|``: the weighted median of ``v / u``."""
    with torch.no_grad():
        au = u.abs()
        ok = (au > 1e-12) & (c[..., None] > 0)
        ratio = torch.where(ok, v / torch.where(ok, u, torch.ones_like(u)), torch.zeros_like(u))
        wts = torch.where(ok, c[..., None] * au, torch.zeros_like(u))
        p = u.shape[0]
        return batched_weighted_median(ratio.reshape(p, -1), wts.reshape(p, -1))


@dataclass
class _PairStack:
    """Oracle predictions for ``P`` ordered pairs stacked for one batched evaluation.

    ``x`` holds ``X_aa`` then ``X_ab`` per pair, ``(P, 2HW, 3)``; ``c`` the matching
    confidences with dynamic pixels zeroed; ``ia``/``ib`` index the state entries.
    """

    x: torch.Tensor
    c: torch.Tensor
    ia: torch.Tensor
    ib: torch.Tensor
    hw: int

    @classmethod
    def build(cls, maps, pairs, state: AlignmentState, masks=None) -> "_PairStack":
        xs, cs = [], []
        for a, b in pairs:
            m = maps(a, b) if callable(maps) else maps
            h, w = m.c_aa.shape
            ca = m.c_aa.clone()
            cb = m.c_ab.clone()
            if masks is not None:
                ca = ca * (~torch.as_tensor(np.asarray(masks[a]), dtype=torch.bool))
                cb = cb * (~torch.as_tensor(np.asarray(masks[b]), dtype=torch.bool))
            xs.append(torch.cat([m.x_aa.reshape(-1, 3), m.x_ab.reshape(-1, 3)]))
            cs.append(torch.cat([ca.reshape(-1), cb.reshape(-1)]))
        ia = torch.tensor([state.index(a) for a, _ in pairs], dtype=torch.long)
        ib = torch.tensor([state.index(b) for _, b in pairs], dtype=torch.long)
        return cls(torch.stack(xs), torch.stack(cs), ia, ib, h * w)

    def __len__(self) -> int:
        return len(self.ia)

    def weight_sums(self) -> torch.Tensor:
        return self.c.sum(1)


def _consistency(stack: _PairStack, rot, trans, depths, focal, cx, cy) -> torch.Tensor:
    """Per-pair confidence-weighted L1 residual normalized by the pixel count, ``(P,)``.

    Residuals are expressed in world orientation about camera a's center:
    ``R_a^T (s X_pred - T_a X_world)`` with ``s`` the pair's closed-form scale.
    """
    pc = _camera_points(depths, focal, cx, cy)
    world = torch.bmm(pc - trans[:, None], rot)
    ctr = -torch.bmm(trans[:, None], rot)[:, 0]
    u = torch.bmm(stack.x, rot[stack.ia])
    v = torch.cat([world[stack.ia], world[stack.ib]], 1) - ctr[stack.ia][:, None]
    s = _pair_scales(u, v, stack.c)
    r = (s[:, None, None] * u - v).abs().sum(-1)
    return (stack.c * r).sum(1) / stack.hw


def consistency_term(maps: _Maps, pose_a: Pose, world_a, world_b, mask_a, mask_b):
    """Confidence-weighted L1 between one pair's prediction and given world points.

    Returns (value, weight sum); the value is not normalized.
    """
    ca = maps.c_aa * (~mask_a)
    cb = maps.c_ab * (~mask_b)
    ctr = -(pose_a.translation @ pose_a.rotation)
    u = torch.cat([(maps.x_aa @ pose_a.rotation).reshape(-1, 3), (maps.x_ab @ pose_a.rotation).reshape(-1, 3)])
    v = torch.cat([(world_a - ctr).reshape(-1, 3), (world_b - ctr).reshape(-1, 3)])
    c = torch.cat([ca.reshape(-1), cb.reshape(-1)])
    wsum = c.sum()
    s = _pair_scales(u[None], v[None], c[None])[0]
    r = (s * u - v).abs().sum(-1)
    return (c * r).sum(), wsum


def smoothness_term(poses: list[Pose]) -> torch.Tensor:
    """Squared change of the relative motion over consecutive triples."""
    total = torch.zeros((), dtype=DTYPE)
    rel = [se3_log(compose(invert(a), b)) for a, b in zip(poses[:-1], poses[1:])]
    for r0, r1 in zip(rel[:-1], rel[1:]):
        total = total + ((r0 - r1) ** 2).sum()
    return total


def _stacked(state: AlignmentState):
    rot = torch.stack([p.rotation for p in state.poses])
    trans = torch.stack([p.translation for p in state.poses])
    cx = torch.tensor([float(k.cx) for k in state.intrinsics], dtype=DTYPE)
    cy = torch.tensor([float(k.cy) for k in state.intrinsics], dtype=DTYPE)
    return rot, trans, cx, cy


def align_loss(
    maps,
    state: AlignmentState,
    a: int,
    b: int,
    masks=None,
    smooth_frames: list[int] | None = None,
    smooth_weight: float = SMOOTH_WEIGHT,
):
    """Consistency of pair (a, b) under ``state`` plus trajectory smoothness.

    ``maps`` is a ``PointMapPair``-like object; ``masks`` maps a frame to its
    dynamic mask (dynamic pixels are excluded).  Returns (loss, empty flag).
    """
    m = maps if isinstance(maps, _Maps) else _Maps(*(torch.as_tensor(x, dtype=DTYPE) for x in (maps.X_aa, maps.X_ab, maps.C_aa, maps.C_ab)))
    stack = _PairStack.build(m, [(a, b)], state, masks)
    rot, trans, cx, cy = _stacked(state)
    focal = torch.as_tensor(state.intrinsics[state.index(a)].fx, dtype=DTYPE)
    loss = CONSISTENCY_WEIGHT * _consistency(stack, rot, trans, state.depths, focal, cx, cy)[0]
    if smooth_frames is not None:
        loss = loss + smooth_weight * smoothness_term([state.poses[state.index(f)] for f in smooth_frames])
    return loss, float(stack.weight_sums()[0]) == 0


# --------------------------------------------------------------------------- optimization


# coarse (steps, initial lr) per initialization; identity starts far from the optimum
INIT_SCHEDULES = {"procrustes": (300, 2e-3), "identity": (2000, 4e-2)}
# fine frames always start close to their optimum (fit or geodesic interpolation)
FINE_SCHEDULE = (300, 2e-3)


@dataclass
class AlignConfig:
    """Optimizer settings; ``steps`` and ``lr`` default per ``init``.

    ``procrustes`` seeds every pose from a weighted similarity fit to its
    anchor's point map, ``identity`` starts keyframes at the identity and
    intermediate frames on the geodesic between their keyframes.
    """

    init: str = "procrustes"
    steps: int | None = None
    lr: float | None = None
    lr_final: float = 1e-5
    smooth_weight: float = SMOOTH_WEIGHT
    window: int | None = None  # fine-alignment pair window, default clip length
    pairs_per_frame: int = 4
    fine_steps: int = FINE_SCHEDULE[0]
    fine_lr: float = FINE_SCHEDULE[1]

    def __post_init__(self):
        if self.init not in INIT_SCHEDULES:
            raise ConfigError(f"unknown alignment init {self.init!r}")
        steps, lr = INIT_SCHEDULES[self.init]
        self.steps = steps if self.steps is None else int(self.steps)
        self.lr = lr if self.lr is None else float(self.lr)
        if self.steps < 0 or not self.lr > 0 or not self.lr_final > 0:
            raise ConfigError("alignment steps must be >= 0 and learning rates positive")


def _umeyama(src: np.ndarray, dst: np.ndarray, w: np.ndarray):
    """Weighted similarity ``dst ~ s R src + t``."""
    w = w / w.sum()
    ms, md = w @ src, w @ dst
    a, b = src - ms, dst - md
    cov = (b * w[:, None]).T @ a
    u, d, vt = np.linalg.svd(cov)
    e = np.eye(3)
    if np.linalg.det(u @ vt) < 0:
        e[2, 2] = -1
    r = u @ e @ vt
    var = (w * (a * a).sum(1)).sum()
    s = float(np.trace(np.diag(d) @ e) / var)
    return s, r, md - s * r @ ms


class _Problem:
    """Differentiable parameterization of the live entries of a state.

    Each live pose gets a left increment ``(exp(omega) R, exp(omega) t + v)``,
    each live depth map a log scale, and the shared focal a log factor.
    Entries outside ``live`` stay bit-identical.
    """

    def __init__(self, state: AlignmentState, live: list[int], fix_poses: bool, optimize_focal: bool):
        self.state = state
        n = len(state.frames)
        self.live = torch.zeros(n, dtype=torch.bool)
        self.live[list(live)] = True
        self.fix_poses = fix_poses
        self.omega = torch.zeros(n, 3, dtype=DTYPE, requires_grad=not fix_poses and bool(self.live.any()))
        self.v = torch.zeros(n, 3, dtype=DTYPE, requires_grad=not fix_poses and bool(self.live.any()))
        self.log_s = torch.zeros(n, dtype=DTYPE, requires_grad=bool(self.live.any()))
        self.log_f = torch.zeros((), dtype=DTYPE, requires_grad=optimize_focal)
        self.rot0, self.trans0, self.cx, self.cy = _stacked(state)
        self.base_depths = state.depths.clone()
        self.base_f = torch.as_tensor(float(state.intrinsics[0].fx), dtype=DTYPE)

    def tensors(self) -> list[torch.Tensor]:
        return [t for t in (self.omega, self.v, self.log_s, self.log_f) if t.requires_grad]

    def current(self):
        """(rotations, translations, depths, focal) with the increments applied."""
        live = self.live
        rot, trans = self.rot0, self.trans0
        if not self.fix_poses:
            re = so3_exp(self.omega)
            rot = torch.where(live[:, None, None], re @ self.rot0, self.rot0)
            trans = torch.where(live[:, None], (re @ self.trans0[..., None])[..., 0] + self.v, self.trans0)
        scale = torch.where(live, torch.exp(self.log_s), torch.ones_like(self.log_s))
        depths = self.base_depths * scale[:, None, None]
        return rot, trans, depths, self.base_f * torch.exp(self.log_f)

    def commit(self) -> AlignmentState:
        st = self.state
        with torch.no_grad():
            rot, trans, depths, f = self.current()
        poses = [Pose(r, t) if bool(self.live[i]) and not self.fix_poses else st.poses[i]
                 for i, (r, t) in enumerate(zip(rot, trans))]
        intr = [_with_focal(k, float(f)) for k in st.intrinsics]
        return AlignmentState(poses, intr, depths.detach(), st.confidence, st.fixed, st.frames)


def _with_focal(k: Intrinsics, f) -> Intrinsics:
    """Intrinsics with both focal lengths replaced; ``f`` may be a tensor."""
    return dataclasses.replace(k, fx=f, fy=f)


def _optimize(problem: _Problem, stack: _PairStack, smooth: list[int] | None, cfg: AlignConfig) -> AlignmentState:
    """Adam with an exponentially decaying step over the mean pair loss.

    ``smooth`` lists state entries, in trajectory order, for the smoothness term.
    """
    params = problem.tensors()
    if not params or len(stack) == 0:
        return problem.commit()
    opt = torch.optim.Adam(params, lr=cfg.lr)
    gamma = (cfg.lr_final / cfg.lr) ** (1.0 / max(cfg.steps, 1))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma)
    d = problem.base_depths
    floor = DIVERGENCE_FLOOR * float(d[d > 0].median()) if bool((d > 0).any()) else DIVERGENCE_FLOOR
    initial = None
    for _ in range(cfg.steps):
        opt.zero_grad()
        rot, trans, depths, f = problem.current()
        loss = CONSISTENCY_WEIGHT * _consistency(stack, rot, trans, depths, f, problem.cx, problem.cy).mean()
        if smooth is not None and len(smooth) >= 3 and cfg.smooth_weight > 0:
            loss = loss + cfg.smooth_weight * smoothness_term([Pose(rot[i], trans[i]) for i in smooth])
        if not bool(torch.isfinite(loss)):
            raise AlignmentFailure("alignment loss is not finite")
        value = float(loss.detach())
        if initial is None:
            initial = max(value, floor)
        elif value > 10 * initial:
            raise AlignmentFailure(f"alignment diverged ({value:.3g} vs initial {initial:.3g})")
        loss.backward()
        opt.step()
        sched.step()
    return problem.commit()


def _initial_state(maps: _MapCache, oracle, frames: list[int]) -> AlignmentState:
    """Depths and confidences from each frame's self pair; identity poses."""
    ks = [oracle.intrinsics(f) for f in frames]
    selfs = [maps(f, f) for f in frames]
    f0 = estimate_focal(selfs[0].x_aa, selfs[0].c_aa, ks[0].cx, ks[0].cy)
    intr = [_with_focal(k, f0) for k in ks]
    depths = torch.stack([torch.where(s.c_aa > 0, s.x_aa[..., 2], torch.zeros_like(s.c_aa)) for s in selfs])
    conf = torch.stack([s.c_aa for s in selfs])
    return AlignmentState([Pose.identity() for _ in frames], intr, depths, conf, [False] * len(frames), list(frames))


def _procrustes_pose(maps: _MapCache, state: AlignmentState, anchor: int, frame: int, masks) -> Pose:
    """Pose of ``frame`` from the pair (anchor, frame) given the anchor's current pose."""
    m = maps(anchor, frame)
    ib = state.index(frame)
    ia = state.index(anchor)
    h, w = m.c_ab.shape
    k = state.intrinsics[ib]
    g = pixel_grid(w, h)
    d = state.depths[ib]
    src = torch.stack([(g[..., 0] - k.cx) / float(k.fx) * d, (g[..., 1] - k.cy) / float(k.fy) * d, d], -1)
    c = m.c_ab * (state.confidence[ib] > 0)
    if masks is not None:
        c = c * (~torch.as_tensor(masks[frame], dtype=torch.bool))
    sel = c > 0
    if int(sel.sum()) < 3:
        return state.poses[ia]
    s, r, t = _umeyama(src[sel].numpy(), m.x_ab[sel].numpy(), c[sel].numpy())
    # x_a = s R x_b + t  =>  T_b = T_(b<-a) T_a with the depth scale folded into the pose
    rel_r = torch.as_tensor(r.T, dtype=DTYPE)
    rel_t = torch.as_tensor(-r.T @ t / s, dtype=DTYPE)
    return compose(Pose(rel_r, rel_t), state.poses[ia])


def coarse_align(
    plan: ClipPlan,
    oracle,
    fixed_keyframe_poses: list[Pose] | None = None,
    masks=None,
    cfg: AlignConfig | None = None,
) -> AlignmentState:
    """Align keyframes over the keyframe graph; keyframe 0 anchors the gauge."""
    cfg = cfg or AlignConfig()
    maps = _MapCache(oracle)
    keys = plan.keyframes
    state = _initial_state(maps, oracle, keys)
    if fixed_keyframe_poses is not None:
        if len(fixed_keyframe_poses) != len(keys):
            raise ConfigError("need one fixed pose per keyframe")
        state.poses = list(fixed_keyframe_poses)
        state.fixed = [True] * len(keys)
    if len(keys) == 1:
        return state
    if fixed_keyframe_poses is None and cfg.init == "procrustes":
        for i in range(1, len(keys)):
            state.poses[i] = _procrustes_pose(maps, state, keys[0], keys[i], masks)
    pairs = []
    for a, b in plan.graph_edges:
        pairs += [(keys[a], keys[b]), (keys[b], keys[a])]
    fixed_poses = fixed_keyframe_poses is not None
    live = list(range(1, len(keys))) if not fixed_poses else list(range(len(keys)))
    problem = _Problem(state, live, fix_poses=fixed_poses, optimize_focal=True)
    stack = _PairStack.build(maps, pairs, state, masks)
    return _optimize(problem, stack, list(range(len(keys))), cfg)


def fine_align(
    plan: ClipPlan,
    oracle,
    coarse: AlignmentState,
    masks=None,
    cfg: AlignConfig | None = None,
) -> AlignmentState:
    """Align every clip's remaining frames against its fixed keyframe."""
    cfg = cfg or AlignConfig()
    maps = _MapCache(oracle)
    n = plan.n_frames
    base = _initial_state(maps, oracle, list(range(n)))
    f = float(coarse.intrinsics[0].fx)
    poses, depths, fixed = list(base.poses), base.depths.clone(), [False] * n
    for kf in plan.keyframes:
        i = coarse.index(kf)
        poses[kf] = coarse.poses[i]
        depths[kf] = coarse.depths[i]
        fixed[kf] = True
    keys = plan.keyframes
    for c, clip in enumerate(plan.clips):
        nxt = keys[c + 1] if c + 1 < len(keys) else None
        for fr in clip:
            if fr == clip.start:
                continue
            if nxt is None and c == 0:
                poses[fr] = poses[clip.start]
            elif nxt is None:
                # trailing clip: continue the geodesic through the last two keyframes
                prev = keys[c - 1]
                poses[fr] = interpolate_pose(poses[prev], poses[clip.start], (fr - prev) / (clip.start - prev))
            else:
                s = (fr - clip.start) / (nxt - clip.start)
                poses[fr] = interpolate_pose(poses[clip.start], poses[nxt], s)
    state = AlignmentState(poses, [_with_focal(k, f) for k in base.intrinsics], depths, base.confidence, fixed, list(range(n)))
    if cfg.init == "procrustes":
        for clip in plan.clips:
            for fr in clip:
                if fr != clip.start:
                    state.poses[fr] = _procrustes_pose(maps, state, clip.start, fr, masks)
    window = cfg.window or max(len(c) for c in plan.clips)
    fine_cfg = dataclasses.replace(cfg, steps=cfg.fine_steps, lr=cfg.fine_lr)
    for c, clip in enumerate(plan.clips):
        frames = list(clip)
        if len(frames) == 1:
            continue
        anchors = [clip.start] + ([keys[c + 1]] if c + 1 < len(keys) else [])
        pairs = []
        for fr in frames[1:]:
            partners = [j for j in frames if j != fr and abs(j - fr) <= window]
            # keep the keyframe plus evenly spread partners to bound the cost
            stride = max(1, len(partners) // max(cfg.pairs_per_frame, 1))
            chosen = sorted(set([anchors[0]] + partners[::stride]))
            pairs += [(fr, j) for j in chosen]
        live = [state.index(fr) for fr in frames[1:]]
        problem = _Problem(state, live, fix_poses=False, optimize_focal=False)
        smooth = frames + ([keys[c + 1]] if c + 1 < len(keys) else [])
        stack = _PairStack.build(maps, pairs, state, masks)
        state = _optimize(problem, stack, [state.index(f) for f in smooth], fine_cfg)
    return state


# --------------------------------------------------------------------------- clouds


@dataclass
class LabeledCloud:
    points: np.ndarray  # (M, 3)
    colors: np.ndarray  # (M, 3) in [0, 1]
    frame: np.ndarray  # (M,) source frame index
    dynamic: np.ndarray  # (M,) bool
    pixel: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))  # (M, 2) (u, v)

    def __len__(self) -> int:
        return len(self.points)

    def select(self, sel) -> "LabeledCloud":
        return LabeledCloud(self.points[sel], self.colors[sel], self.frame[sel], self.dynamic[sel], self.pixel[sel])

    @staticmethod
    def empty() -> "LabeledCloud":
        return LabeledCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool),
                            np.zeros((0, 2), dtype=np.int64))

    @staticmethod
    def cat(parts: list["LabeledCloud"]) -> "LabeledCloud":
        if not parts:
            return LabeledCloud.empty()
        return LabeledCloud(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("points", "colors", "frame", "dynamic", "pixel")))


def disentangle(state: AlignmentState, masks, frames, threshold: float = CONF_THRESHOLD):
    """Back-project every confident pixel; split by the dynamic mask."""
    stat, dyn = [], []
    for k, fr in enumerate(state.frames):
        d = state.depths[k]
        m = torch.as_tensor(np.asarray(masks[fr]), dtype=torch.bool)
        ok = (state.confidence[k] > threshold) & (d > 0)
        if not bool(ok.any()):
            continue
        h, w = d.shape
        g = pixel_grid(w, h)
        x = back_project(g[ok], d[ok], state.camera(fr)).numpy()
        img = np.asarray(frames[fr])
        vv, uu = torch.nonzero(ok, as_tuple=True)
        col = img[vv.numpy(), uu.numpy()]
        flag = m[ok].numpy()
        pix = np.stack([uu.numpy(), vv.numpy()], 1)
        cloud = LabeledCloud(x, col, np.full(len(x), fr, dtype=np.int64), flag, pix)
        stat.append(cloud.select(~flag))
        dyn.append(cloud.select(flag))
    return LabeledCloud.cat(stat), LabeledCloud.cat(dyn)


def color_entropy(pixels: np.ndarray, bins: int = 16) -> float:
    """Shannon entropy (nats) of the ``bins^3`` RGB histogram of ``pixels (M, 3)``."""
    if len(pixels) == 0:
        return 0.0
    q = np.clip((np.asarray(pixels) * bins).astype(np.int64), 0, bins - 1)
    key = (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2]
    counts = np.bincount(key, minlength=bins**3).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def reference_scores(masks, frames) -> np.ndarray:
    counts = np.array([float(np.asarray(m).sum()) for m in masks])
    ents = np.array([color_entropy(np.asarray(f)[np.asarray(m, dtype=bool)]) for f, m in zip(frames, masks)])
    norm = lambda x: x / x.max() if x.max() > 0 else np.zeros_like(x)
    return norm(counts) + norm(ents)


def voxel_downsample(cloud: LabeledCloud, voxel: float) -> LabeledCloud:
    """One representative per occupied voxel: centroid position, mean color."""
    if len(cloud) == 0:
        return cloud
    key = np.floor(cloud.points / voxel).astype(np.int64)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    cnt = np.bincount(inv).astype(np.float64)
    pts = np.stack([np.bincount(inv, cloud.points[:, k]) for k in range(3)], 1) / cnt[:, None]
    col = np.stack([np.bincount(inv, cloud.colors[:, k]) for k in range(3)], 1) / cnt[:, None]
    first = np.full(len(uniq), len(cloud), dtype=np.int64)
    np.minimum.at(first, inv, np.arange(len(cloud)))
    return LabeledCloud(pts, col, cloud.frame[first], cloud.dynamic[first], cloud.pixel[first])


def scene_diameter(points: np.ndarray) -> float:
    if len(points) == 0:
        return 0.0
    return float(np.linalg.norm(points.max(0) - points.min(0)))


def select_reference_and_fuse(p_stat: LabeledCloud, p_dyn: LabeledCloud, masks, frames, keyframes, voxel_divisor: float = 256.0):
    """Returns (dynamic seed, static seed, reference frame index)."""
    if len(p_stat) == 0:
        raise ConfigError("static cloud is empty")
    scores = reference_scores(masks, frames)
    ref = int(np.argmax(scores))  # first maximum wins ties
    dyn = p_dyn.select(p_dyn.frame == ref)
    if len(dyn) == 0:
        log.warning("dynamic seed cloud is empty")
    src = set(keyframes) | {ref}
    stat = p_stat.select(np.isin(p_stat.frame, sorted(src)))
    voxel = scene_diameter(p_stat.points) / voxel_divisor
    if voxel > 0:
        stat = voxel_downsample(stat, voxel)
    return dyn, stat, ref


# --------------------------------------------------------------------------- evaluation helpers


def pose_errors(est: list[Pose], gt: list[Pose], diameter: float):
    """Rotation (deg) and translation (fraction of ``diameter``) errors after
    expressing both trajectories relative to their first camera and fitting
    one global scale to the translations."""
    def rel(poses):
        t0inv = invert(poses[0])
        return [compose(p, t0inv) for p in poses]

    e, g = rel(est), rel(gt)
    ce = np.stack([p.center.numpy() for p in e])
    cg = np.stack([p.center.numpy() for p in g])
    den = float((ce * ce).sum())
    s = float((ce * cg).sum()) / den if den > 0 else 1.0
    rot = [math.degrees(rotation_angle(a.rotation @ b.rotation.T)) for a, b in zip(e, g)]
    trans = [float(np.linalg.norm(s * a - b)) / diameter for a, b in zip(ce, cg)]
    return np.array(rot), np.array(trans)
