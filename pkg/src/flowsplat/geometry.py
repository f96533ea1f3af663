"""Pinhole cameras, rigid transforms, projection and back-projection.

Conventions used throughout the package:

* ``Pose`` is the world-to-camera extrinsic ``T``: ``X_cam = R @ X_world + t``.
* Pixel centers sit at integer coordinates, origin at the top-left corner,
  ``u`` to the right and ``v`` down.
* Everything is float64 torch; inputs are converted with ``torch.as_tensor``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .errors import ConfigError, CutLocusError, InvalidDepthError, ProjectionDegenerateError

DTYPE = torch.float64
NEAR_PLANE = 0.01


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point outside the image")

    @property
    def K(self) -> torch.Tensor:
        return as_tensor([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "rotation", as_tensor(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", as_tensor(self.translation).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(torch.eye(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = as_tensor(m)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> torch.Tensor:
        """3x4 row-major ``[R | t]``."""
        return torch.cat([self.rotation, self.translation[:, None]], dim=1)

    def matrix4(self) -> torch.Tensor:
        m = torch.eye(4, dtype=DTYPE)
        m[:3, :4] = self.matrix()
        return m

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        return points @ self.rotation.T + self.translation

    @property
    def center(self) -> torch.Tensor:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        ortho = torch.max(torch.abs(r.T @ r - torch.eye(3, dtype=DTYPE))).item()
        return ortho <= tol and abs(torch.linalg.det(r).item() - 1.0) <= tol

    def detach(self) -> "Pose":
        return Pose(self.rotation.detach(), self.translation.detach())


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: Intrinsics
    pose: Pose
    timestamp: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.timestamp <= 1.0:
            raise ConfigError(f"timestamp {self.timestamp} outside [0, 1]")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def with_pose(self, pose: Pose) -> "Camera":
        return replace(self, pose=pose)


def compose(a: Pose, b: Pose) -> Pose:
    """``compose(a, b)`` applies ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def project(points, camera: Camera, check: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Project world points ``(..., 3)`` to pixels ``(..., 2)`` and camera-frame depth.

    Depth may be negative; visibility is left to the caller.
    """
    points = as_tensor(points)
    pc = camera.pose.apply(points)
    z = pc[..., 2]
    if check and bool(torch.any(torch.abs(z) < 1e-12)):
        raise ProjectionDegenerateError("point on the camera plane (z == 0)")
    k = camera.intrinsics
    u = k.fx * pc[..., 0] / z + k.cx
    v = k.fy * pc[..., 1] / z + k.cy
    return torch.stack([u, v], dim=-1), z


def pixel_rays(pixels, intrinsics: Intrinsics) -> torch.Tensor:
    """``K^-1 [u, v, 1]`` for pixels ``(..., 2)``."""
    pixels = as_tensor(pixels)
    x = (pixels[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (pixels[..., 1] - intrinsics.cy) / intrinsics.fy
    return torch.stack([x, y, torch.ones_like(x)], dim=-1)


def back_project(pixels, depth, camera: Camera, check: bool = True) -> torch.Tensor:
    """``X_w = T^-1 (depth * K^-1 p~)``; ``depth`` is camera-frame z."""
    depth = as_tensor(depth)
    if check and bool(torch.any(depth <= 0)):
        raise InvalidDepthError("depth must be positive")
    pc = pixel_rays(pixels, camera.intrinsics) * depth[..., None]
    r, t = camera.pose.rotation, camera.pose.translation
    return (pc - t) @ r


def pixel_grid(width: int, height: int) -> torch.Tensor:
    """``(H, W, 2)`` grid of ``(u, v)`` pixel centers."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=DTYPE), torch.arange(width, dtype=DTYPE), indexing="ij"
    )
    return torch.stack([u, v], dim=-1)


def hat(w: torch.Tensor) -> torch.Tensor:
    z = torch.zeros_like(w[..., 0])
    return torch.stack(
        [
            torch.stack([z, -w[..., 2], w[..., 1]], -1),
            torch.stack([w[..., 2], z, -w[..., 0]], -1),
            torch.stack([-w[..., 1], w[..., 0], z], -1),
        ],
        -2,
    )


def _so3_coeffs(theta_sq: torch.Tensor):
    """``sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3`` with Taylor fallback near 0."""
    small = theta_sq < 1e-8
    ts = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    t = torch.sqrt(ts)
    a = torch.where(small, 1 - theta_sq / 6, torch.sin(t) / t)
    b = torch.where(small, 0.5 - theta_sq / 24, (1 - torch.cos(t)) / ts)
    c = torch.where(small, 1.0 / 6 - theta_sq / 120, (t - torch.sin(t)) / (ts * t))
    return a, b, c


def so3_exp(w) -> torch.Tensor:
    w = as_tensor(w)
    a, b, _ = _so3_coeffs((w * w).sum(-1))
    k = hat(w)
    eye = torch.eye(3, dtype=DTYPE).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def se3_exp(v) -> Pose:
    """6-vector ``(rho, omega)`` to a pose; translation part uses the left Jacobian."""
    v = as_tensor(v)
    rho, w = v[:3], v[3:]
    a, b, c = _so3_coeffs((w * w).sum())
    k = hat(w)
    eye = torch.eye(3, dtype=DTYPE)
    rot = eye + a * k + b * (k @ k)
    jac = eye + b * k + c * (k @ k)
    return Pose(rot, jac @ rho)


def so3_log(r) -> torch.Tensor:
    r = as_tensor(r)
    cos = (torch.diagonal(r, dim1=-2, dim2=-1).sum(-1) - 1) / 2
    vee = torch.stack(
        [r[..., 2, 1] - r[..., 1, 2], r[..., 0, 2] - r[..., 2, 0], r[..., 1, 0] - r[..., 0, 1]], -1
    )
    # epsilon keeps the gradient finite at the identity
    theta = torch.atan2(torch.sqrt((vee * vee).sum(-1) + 1e-300) / 2, cos)
    if bool(torch.any(theta >= torch.pi - 1e-6)):
        raise CutLocusError("rotation angle within 1e-6 of pi")
    small = theta < 1e-6
    ts = torch.where(small, torch.ones_like(theta), theta)
    scale = torch.where(small, 0.5 + theta**2 / 12, ts / (2 * torch.sin(ts)))
    return scale[..., None] * vee


def se3_log(a: Pose) -> torch.Tensor:
    w = so3_log(a.rotation)
    theta_sq = (w * w).sum()
    k = hat(w)
    eye = torch.eye(3, dtype=DTYPE)
    small = theta_sq < 1e-8
    ts = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    t = torch.sqrt(ts)
    # V^-1 = I - K/2 + (1/t^2)(1 - t sin t / (2(1 - cos t))) K^2
    coef = torch.where(small, 1.0 / 12 + theta_sq / 720, (1 - t * torch.sin(t) / (2 * (1 - torch.cos(t)))) / ts)
    vinv = eye - 0.5 * k + coef * (k @ k)
    return torch.cat([vinv @ a.translation, w])


def rotation_angle(r) -> float:
    r = as_tensor(r)
    cos = ((torch.trace(r) - 1) / 2).clamp(-1.0, 1.0)
    return float(torch.arccos(cos))


def quat_to_matrix(q) -> torch.Tensor:
    """Unit quaternion ``(w, x, y, z)`` to rotation matrix; ``q`` is normalized first."""
    q = as_tensor(q)
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """World-to-camera pose for a camera at ``eye`` looking toward ``target``.

    Camera axes: +z forward, +x right, +y down (image ``v`` direction).
    """
    eye, target, up = as_tensor(eye), as_tensor(target), as_tensor(up)
    fwd = target - eye
    fwd = fwd / torch.linalg.norm(fwd)
    right = torch.linalg.cross(fwd, up)
    right = right / torch.linalg.norm(right)
    down = torch.linalg.cross(fwd, right)
    r = torch.stack([right, down, fwd])
    return Pose(r, -r @ eye)


def interpolate_pose(a: Pose, b: Pose, s: float) -> Pose:
    """Geodesic interpolation on SE(3): ``a * exp(s * log(a^-1 b))`` in camera-to-world form."""
    ca, cb = invert(a), invert(b)
    delta = se3_log(compose(invert(ca), cb))
    return invert(compose(ca, se3_exp(s * delta)))
