"""Synthetic dynamic scenes with analytic ground truth, plus image metrics.

Scenes are textured planes and spheres.  Static primitives never move; dynamic
spheres translate rigidly along a polynomial-plus-sinusoid trajectory.  Every
frame is ray cast analytically at pixel centers, so depth, masks, optical flow
and point maps are exact.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import GenerationError
from .geometry import DTYPE, NEAR_PLANE, Camera, Intrinsics, Pose, look_at

# --------------------------------------------------------------------------- textures


class ValueNoise:
    """Multi-octave colored value noise on a periodic lattice."""

    def __init__(self, seed: int, dims: int, freq: float, octaves: int = 3, lattice: int = 64):
        rng = np.random.default_rng(seed)
        self.dims = dims
        self.freq = freq
        self.octaves = octaves
        self.lattice = lattice
        self.tables = [rng.uniform(0, 1, size=(lattice,) * dims + (3,)) for _ in range(octaves)]

    @staticmethod
    def _fade(t):
        return t * t * t * (t * (t * 6 - 15) + 10)

    def _octave(self, table, x):
        g = self.lattice
        base = np.floor(x)
        frac = self._fade(x - base)
        base = base.astype(np.int64)
        out = 0.0
        for corner in range(2**self.dims):
            bits = [(corner >> k) & 1 for k in range(self.dims)]
            idx = tuple((base[..., k] + bits[k]) % g for k in range(self.dims))
            w = 1.0
            for k in range(self.dims):
                w = w * (frac[..., k] if bits[k] else 1 - frac[..., k])
            out = out + w[..., None] * table[idx]
        return out

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        total, norm, amp, f = 0.0, 0.0, 1.0, self.freq
        for table in self.tables:
            total = total + amp * self._octave(table, coords * f)
            norm += amp
            amp *= 0.5
            f *= 2.0
        # stretch contrast around 0.5 so the texture is informative
        return np.clip(0.5 + 1.6 * (total / norm - 0.5), 0.0, 1.0)


# --------------------------------------------------------------------------- scene description


@dataclass
class PlaneSpec:
    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    up: tuple[float, float, float]
    half_size: tuple[float, float]
    texture_seed: int = 0
    texture_freq: float = 2.0


@dataclass
class SphereSpec:
    center: tuple[float, float, float]
    radius: float
    texture_seed: int = 1
    texture_freq: float = 3.0
    # position(t) = center + sum_k poly[k] t^(k+1) + amp * sin(2 pi freq t + phase)
    poly: list[tuple[float, float, float]] = field(default_factory=list)
    sin_amp: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sin_freq: float = 0.0
    sin_phase: float = 0.0

    def position(self, t: float) -> np.ndarray:
        p = np.array(self.center, dtype=np.float64)
        for k, c in enumerate(self.poly):
            p = p + np.asarray(c, dtype=np.float64) * t ** (k + 1)
        return p + np.asarray(self.sin_amp) * math.sin(2 * math.pi * self.sin_freq * t + self.sin_phase)


@dataclass
class CameraPath:
    """Orbit around ``target`` in the xz-plane; angle linear in time."""

    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    distance: float = 3.0
    height: float = 0.0
    angle_start: float = -0.15
    angle_end: float = 0.15

    def pose(self, t: float) -> Pose:
        a = self.angle_start + (self.angle_end - self.angle_start) * t
        tgt = np.asarray(self.target, dtype=np.float64)
        eye = tgt + np.array([self.distance * math.sin(a), self.height, -self.distance * math.cos(a)])
        return look_at(eye, tgt, (0.0, -1.0, 0.0))


@dataclass
class SceneSpec:
    planes: list[PlaneSpec]
    dynamic_spheres: list[SphereSpec]
    static_spheres: list[SphereSpec] = field(default_factory=list)
    camera: CameraPath = field(default_factory=CameraPath)
    n_frames: int = 48
    width: int = 32
    height: int = 32
    focal: float = 36.0
    seed: int = 0
    name: str = "custom"
    supersample: int = 3  # image color is the box-filtered mean of s x s sub-pixel rays

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["planes"] = [PlaneSpec(**_tupled(p)) for p in d["planes"]]
        d["dynamic_spheres"] = [_sphere(s) for s in d.get("dynamic_spheres", [])]
        d["static_spheres"] = [_sphere(s) for s in d.get("static_spheres", [])]
        d["camera"] = CameraPath(**_tupled(d.get("camera", {})))
        return cls(**d)

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)

    def times(self) -> np.ndarray:
        if self.n_frames == 1:
            return np.zeros(1)
        return np.linspace(0.0, 1.0, self.n_frames)

    def cameras(self) -> list[Camera]:
        k = self.intrinsics()
        return [Camera(k, self.camera.pose(float(t)), float(t)) for t in self.times()]


def _tupled(d: dict) -> dict:
    """JSON turns tuples into lists; restore them so specs compare equal after a round trip."""
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _sphere(d: dict) -> SphereSpec:
    d = _tupled(d)
    d["poly"] = [tuple(c) for c in d.get("poly", ())]
    return SphereSpec(**d)


def _wall(seed: int) -> PlaneSpec:
    return PlaneSpec((0.0, 0.0, 0.0), (0.0, 0.0, -1.0), (0.0, -1.0, 0.0), (3.0, 3.0), seed, 2.2)


def preset(name: str, **overrides) -> SceneSpec:
    """Shipped scenes: ``moving-sphere``, ``two-body`` and ``static-only``."""
    seed = overrides.pop("seed", 0)
    if name == "moving-sphere":
        spec = SceneSpec(
            planes=[_wall(seed)],
            dynamic_spheres=[
                SphereSpec((-0.35, 0.05, -0.8), 0.38, seed + 1, 2.5, poly=[(0.7, -0.1, 0.0)],
                           sin_amp=(0.0, 0.12, 0.0), sin_freq=1.0)
            ],
            name=name,
            seed=seed,
        )
    elif name == "two-body":
        spec = SceneSpec(
            planes=[_wall(seed)],
            dynamic_spheres=[
                SphereSpec((-0.5, -0.15, -0.7), 0.28, seed + 1, 3.0, poly=[(1.0, 0.2, 0.0)]),
                SphereSpec((0.5, 0.2, -1.1), 0.25, seed + 2, 3.0, poly=[(-1.0, -0.2, 0.0)]),
            ],
            name=name,
            seed=seed,
        )
    elif name == "static-only":
        spec = SceneSpec(
            planes=[_wall(seed)],
            dynamic_spheres=[],
            static_spheres=[SphereSpec((0.2, 0.1, -0.8), 0.35, seed + 1, 2.5)],
            name=name,
            seed=seed,
        )
    else:
        raise KeyError(f"unknown preset {name!r}")
    for k, v in overrides.items():
        if not hasattr(spec, k):
            raise KeyError(f"unknown scene field {k!r}")
        setattr(spec, k, v)
    return spec


# --------------------------------------------------------------------------- ray casting


def ray_sphere(origin, dirs, center, radius) -> np.ndarray:
    """Smallest positive ray parameter hitting the sphere; NaN on a miss.

    With ``dirs`` whose camera-frame z component is 1 this is the z-depth.
    """
    oc = np.asarray(origin) - np.asarray(center)
    a = np.einsum("...i,...i", dirs, dirs)
    b = 2 * np.einsum("...i,i", dirs, oc)
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        sq = np.sqrt(disc)
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > NEAR_PLANE, t0, np.where(t1 > NEAR_PLANE, t1, np.nan))
    return np.where(disc >= 0, t, np.nan)


class _Plane:
    def __init__(self, spec: PlaneSpec):
        self.spec = spec
        self.c = np.asarray(spec.center, dtype=np.float64)
        n = np.asarray(spec.normal, dtype=np.float64)
        self.n = n / np.linalg.norm(n)
        up = np.asarray(spec.up, dtype=np.float64)
        self.v = up - (up @ self.n) * self.n
        self.v /= np.linalg.norm(self.v)
        self.u = np.cross(self.v, self.n)
        self.tex = ValueNoise(spec.texture_seed, 2, spec.texture_freq)

    def intersect(self, origin, dirs, t):
        denom = dirs @ self.n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((self.c - origin) @ self.n) / denom
        hit = origin + s[..., None] * dirs
        lu = (hit - self.c) @ self.u
        lv = (hit - self.c) @ self.v
        ok = (np.abs(denom) > 1e-12) & (s > NEAR_PLANE)
        ok &= (np.abs(lu) <= self.spec.half_size[0]) & (np.abs(lv) <= self.spec.half_size[1])
        return np.where(ok, s, np.nan)

    def color(self, points, t):
        d = points - self.c
        return self.tex(np.stack([d @ self.u, d @ self.v], -1))

    def contains(self, point, t) -> bool:
        return False


class _Sphere:
    def __init__(self, spec: SphereSpec, dynamic: bool):
        self.spec = spec
        self.dynamic = dynamic
        self.tex = ValueNoise(spec.texture_seed, 3, spec.texture_freq)

    def center(self, t):
        return self.spec.position(t) if self.dynamic else np.asarray(self.spec.center, dtype=np.float64)

    def intersect(self, origin, dirs, t):
        return ray_sphere(origin, dirs, self.center(t), self.spec.radius)

    def color(self, points, t):
        # texture lives in the sphere's body frame, so it travels with it
        return self.tex(points - self.center(t) + 8.0)

    def contains(self, point, t) -> bool:
        return float(np.linalg.norm(point - self.center(t))) < self.spec.radius


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) camera z; 0 where nothing is hit
    mask: np.ndarray  # (H, W) bool, dynamic
    ids: np.ndarray  # (H, W) int primitive id, -1 for background
    points: np.ndarray  # (H, W, 3) world hit points
    camera: Camera


@dataclass
class GroundTruth:
    spec: SceneSpec
    frames: list[Frame]
    flows: list[np.ndarray]  # pair i -> i+1: (H, W, 2)
    flow_valid: list[np.ndarray]  # (H, W) bool
    static_points: np.ndarray
    dynamic_points: np.ndarray  # canonical (t = 0) samples

    @property
    def cameras(self) -> list[Camera]:
        return [f.camera for f in self.frames]

    def dynamic_center(self, k: int, t: float) -> np.ndarray:
        return self.spec.dynamic_spheres[k].position(t)


class Scene:
    """Ray-castable primitive set built from a ``SceneSpec``."""

    def __init__(self, spec: SceneSpec):
        if not spec.planes and not spec.static_spheres:
            raise GenerationError("a scene needs at least one static primitive")
        self.spec = spec
        self.prims = [_Plane(p) for p in spec.planes]
        self.prims += [_Sphere(s, False) for s in spec.static_spheres]
        self.dynamic_ids = []
        for s in spec.dynamic_spheres:
            self.dynamic_ids.append(len(self.prims))
            self.prims.append(_Sphere(s, True))

    def cast(self, camera: Camera, pixels: np.ndarray | None = None):
        """Ray cast pixel centers (or the given (..., 2) pixels) at ``camera.timestamp``."""
        k = camera.intrinsics
        if pixels is None:
            v, u = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij")
            pixels = np.stack([u, v], -1)
        rays = np.stack([(pixels[..., 0] - k.cx) / k.fx, (pixels[..., 1] - k.cy) / k.fy, np.ones(pixels.shape[:-1])], -1)
        rot = camera.pose.rotation.numpy()
        origin = camera.pose.center.numpy()
        dirs = rays @ rot  # camera-frame z of every dir is 1, so hit distance is z-depth
        t = camera.timestamp
        for p in self.prims:
            if p.contains(origin, t):
                raise GenerationError("camera inside a primitive")
        depth = np.full(pixels.shape[:-1], np.inf)
        ids = np.full(pixels.shape[:-1], -1, dtype=np.int64)
        for i, p in enumerate(self.prims):
            s = p.intersect(origin, dirs, t)
            closer = np.isfinite(s) & (s < depth)
            depth = np.where(closer, s, depth)
            ids = np.where(closer, i, ids)
        hit = np.isfinite(depth)
        depth = np.where(hit, depth, 0.0)
        points = origin + depth[..., None] * dirs
        color = np.zeros(pixels.shape[:-1] + (3,))
        for i, p in enumerate(self.prims):
            sel = ids == i
            if sel.any():
                color[sel] = p.color(points[sel], t)
        return color, depth, ids, points

    def displacement(self, ids: np.ndarray, t1: float, t2: float) -> np.ndarray:
        """World-space motion of surface points on each primitive from t1 to t2."""
        out = np.zeros(ids.shape + (3,))
        for i in self.dynamic_ids:
            p = self.prims[i]
            out[ids == i] = p.center(t2) - p.center(t1)
        return out


def _project_np(points, cam: Camera):
    r, t = cam.pose.rotation.numpy(), cam.pose.translation.numpy()
    pc = points @ r.T + t
    k = cam.intrinsics
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * pc[..., 0] / z + k.cx
        v = k.fy * pc[..., 1] / z + k.cy
    return np.stack([u, v], -1), z


def analytic_flow(scene: Scene, f1: Frame, f2: Frame):
    """Transport every surface point of ``f1`` to ``f2``'s time and project it.

    A pixel is valid when the transported point is the visible surface in
    ``f2`` and the 2x2 bilinear footprint around its target lies on the same
    primitive.
    """
    h, w = f1.depth.shape
    t1, t2 = f1.camera.timestamp, f2.camera.timestamp
    moved = f1.points + scene.displacement(f1.ids, t1, t2)
    p2, z2 = _project_np(moved, f2.camera)
    grid = np.stack(np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64), indexing="xy"), -1)
    # difference of two projections of the same point; exactly zero when nothing moves
    p1, _ = _project_np(f1.points, f1.camera)
    flow = np.where((f1.ids >= 0)[..., None], p2 - p1, 0.0)
    valid = (f1.ids >= 0) & (z2 > NEAR_PLANE)
    valid &= (p2[..., 0] >= 0) & (p2[..., 0] <= w - 1) & (p2[..., 1] >= 0) & (p2[..., 1] <= h - 1)
    safe = np.where(valid[..., None], p2, 0.0)
    _, d_hit, id_hit, _ = scene.cast(f2.camera, safe)
    valid &= (id_hit == f1.ids) & (np.abs(d_hit - z2) <= 1e-6 * np.maximum(z2, 1.0))
    x0 = np.clip(np.floor(safe[..., 0]).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(safe[..., 1]).astype(int), 0, h - 1)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        valid &= f2.ids[yy, xx] == f1.ids
    flow = np.where(valid[..., None], flow, 0.0)
    return flow, valid


def _surface_samples(scene: Scene, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    stat, dyn = [], []
    for i, p in enumerate(scene.prims):
        if isinstance(p, _Plane):
            a = rng.uniform(-1, 1, size=(n, 2)) * np.asarray(p.spec.half_size)
            stat.append(p.c + a[:, :1] * p.u + a[:, 1:] * p.v)
        else:
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            pts = p.center(0.0) + p.spec.radius * d
            (dyn if p.dynamic else stat).append(pts)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros((0, 3))
    return cat(stat), cat(dyn)


def _antialiased(scene: Scene, cam: Camera, s: int) -> np.ndarray:
    """Mean color of ``s * s`` stratified rays per pixel; background stays black."""
    k = cam.intrinsics
    v, u = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij")
    offs = (np.arange(s) + 0.5) / s - 0.5
    total = np.zeros((k.height, k.width, 3))
    for dy in offs:
        for dx in offs:
            total += scene.cast(cam, np.stack([u + dx, v + dy], -1))[0]
    return total / (s * s)


def generate(spec: SceneSpec) -> GroundTruth:
    scene = Scene(spec)
    frames = []
    for cam in spec.cameras():
        color, depth, ids, points = scene.cast(cam)
        if spec.supersample > 1:
            color = _antialiased(scene, cam, spec.supersample)
        mask = np.isin(ids, scene.dynamic_ids)
        frames.append(Frame(color, depth, mask, ids, points, cam))
    flows, valids = [], []
    for f1, f2 in zip(frames[:-1], frames[1:]):
        fl, va = analytic_flow(scene, f1, f2)
        _self_check(scene, f1, f2, fl, va)
        flows.append(fl)
        valids.append(va)
    stat, dyn = _surface_samples(scene, 2000, np.random.default_rng(spec.seed))
    return GroundTruth(spec, frames, flows, valids, stat, dyn)


def _self_check(scene: Scene, f1: Frame, f2: Frame, flow, valid):
    """Flow must agree with depth + cameras + trajectories via the torch geometry path."""
    from .geometry import back_project, pixel_grid, project

    if not valid.any():
        return
    grid = pixel_grid(f1.depth.shape[1], f1.depth.shape[0])
    sel = torch.from_numpy(valid)
    x = back_project(grid[sel], torch.from_numpy(f1.depth)[sel], f1.camera)
    disp = torch.from_numpy(scene.displacement(f1.ids, f1.camera.timestamp, f2.camera.timestamp))[sel]
    p2, _ = project(x + disp, f2.camera)
    err = (p2 - grid[sel] - torch.from_numpy(flow)[sel]).abs().max().item()
    if err > 1e-6:
        raise GenerationError(f"flow self-check failed ({err:.3g} px)")


# --------------------------------------------------------------------------- point-map oracle


@dataclass
class PointMapPair:
    X_aa: torch.Tensor  # (H, W, 3) frame a in a's camera coordinates
    X_ab: torch.Tensor  # (H, W, 3) frame b in a's camera coordinates
    C_aa: torch.Tensor  # (H, W) in [0, 1]
    C_ab: torch.Tensor


class HarnessOracle:
    """Analytic stand-in for a pairwise point-map network.

    Depth noise is multiplicative along each pixel ray with std ``noise``.
    Dynamic pixels get confidence ``dynamic_confidence``; background pixels 0.
    """

    def __init__(self, gt: GroundTruth, noise: float = 0.0, dynamic_confidence: float = 0.6, seed: int = 0,
                 frames: list[int] | None = None):
        self.gt = gt
        self.noise = noise
        self.dynamic_confidence = dynamic_confidence
        self.seed = seed
        self.frames = list(range(len(gt.frames))) if frames is None else list(frames)

    def __len__(self) -> int:
        return len(self.frames)

    def _points(self, i: int, rng):
        f = self.gt.frames[i]
        k = f.camera.intrinsics
        h, w = f.depth.shape
        v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        d = f.depth.copy()
        if self.noise > 0:
            d = d * (1 + self.noise * rng.standard_normal(d.shape))
        pc = np.stack([(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d], -1)
        conf = np.where(f.ids >= 0, 1.0, 0.0)
        conf = np.where(f.mask, self.dynamic_confidence, conf)
        pc = np.where((f.ids >= 0)[..., None], pc, 0.0)
        return pc, conf

    def point_maps(self, a: int, b: int) -> PointMapPair:
        """Indices are positions in ``self.frames``."""
        fa, fb = self.frames[a], self.frames[b]
        rng = np.random.default_rng([self.seed, fa, fb])
        xa, ca = self._points(fa, rng)
        if a == b and self.noise == 0:
            xb, cb = xa.copy(), ca.copy()
        else:
            xb, cb = self._points(fb, rng)
        # a self pair skips the identity transform so X_ab equals X_aa exactly
        ta, tb = self.gt.frames[fa].camera.pose, self.gt.frames[fb].camera.pose
        # b camera -> world -> a camera
        rel_r = (ta.rotation @ tb.rotation.T).numpy()
        rel_t = (ta.translation - ta.rotation @ tb.rotation.T @ tb.translation).numpy()
        if fa != fb:
            xb = np.where(cb[..., None] > 0, xb @ rel_r.T + rel_t, 0.0)
        as_t = lambda x: torch.as_tensor(x, dtype=DTYPE)
        return PointMapPair(as_t(xa), as_t(xb), as_t(ca), as_t(cb))

    def image(self, i: int) -> np.ndarray:
        return self.gt.frames[self.frames[i]].image

    def mask(self, i: int) -> np.ndarray:
        return self.gt.frames[self.frames[i]].mask

    def intrinsics(self, i: int) -> Intrinsics:
        return self.gt.frames[self.frames[i]].camera.intrinsics


# --------------------------------------------------------------------------- metrics


def psnr(a, b, mask=None) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; capped at 100 dB."""
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    d2 = (a - b) ** 2
    if mask is not None:
        m = torch.as_tensor(mask, dtype=torch.bool)
        d2 = d2[m]
    mse = float(d2.mean())
    if mse < 1e-10:
        return 100.0
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b) -> float:
    from .warploss import ssim_map

    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    return float(ssim_map(a, b).mean())


def endpoint_error(flow, gt_flow, mask) -> float:
    """Mean Euclidean distance over ``mask`` of two ``(H, W, 2)`` flows."""
    from .errors import EmptySupportError

    flow = torch.as_tensor(flow, dtype=DTYPE)
    gt_flow = torch.as_tensor(gt_flow, dtype=DTYPE)
    m = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(m.any()):
        raise EmptySupportError("no pixels to evaluate")
    return float(torch.linalg.norm(flow - gt_flow, dim=-1)[m].mean())
