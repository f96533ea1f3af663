"""Rendered optical flow: full flow from Gaussian transport, camera flow from depth."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import CorrespondenceError, DegenerateGaussianError
from .geometry import DTYPE, NEAR_PLANE, Camera, back_project, pixel_grid, project
from .splat import Composite, Projected, blend, project_gaussians, render_projected

ALPHA_VALID = 1e-3
DET_FLOOR = 1e-12


@dataclass
class FlowField:
    """Displacements ``flow (H, W, 2)`` in pixels on frame-1's grid plus a validity mask.

    Invalid pixels always carry zero flow.
    """

    flow: torch.Tensor
    valid: torch.Tensor

    def __post_init__(self):
        self.flow = torch.where(self.valid[..., None], self.flow, torch.zeros_like(self.flow))

    @property
    def du(self) -> torch.Tensor:
        return self.flow[..., 0]

    @property
    def dv(self) -> torch.Tensor:
        return self.flow[..., 1]

    @property
    def height(self) -> int:
        return self.flow.shape[0]

    @property
    def width(self) -> int:
        return self.flow.shape[1]

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(torch.zeros(height, width, 2, dtype=DTYPE), torch.ones(height, width, dtype=torch.bool))

    def detach(self) -> "FlowField":
        return FlowField(self.flow.detach(), self.valid)


def transport_payload(proj1: Projected, proj2: Projected, used=None) -> torch.Tensor:
    """Per-Gaussian affine transport ``x -> A x + b`` with ``A = Sigma2 Sigma1^-1`` and
    ``b = mu2 - A mu1``, flattened to ``(N, 7)`` as ``[A, b, visible_at_t2]``.

    Gaussians invisible at t2 get zeros in all seven channels.
    """
    if len(proj1) != len(proj2):
        raise CorrespondenceError(f"{len(proj1)} Gaussians at t1 but {len(proj2)} at t2")
    c1 = proj1.cov2d
    det = c1[:, 0, 0] * c1[:, 1, 1] - c1[:, 0, 1] * c1[:, 1, 0]
    check = proj1.visible if used is None else used
    if bool(torch.any(det.detach()[check] <= DET_FLOOR)):
        raise DegenerateGaussianError("singular t1 covariance in flow transport")
    safe = torch.where(det.detach() > DET_FLOOR, det, torch.ones_like(det))
    inv = torch.stack(
        [torch.stack([c1[:, 1, 1], -c1[:, 0, 1]], -1), torch.stack([-c1[:, 1, 0], c1[:, 0, 0]], -1)], -2
    ) / safe[:, None, None]
    a = proj2.cov2d @ inv
    b = proj2.means2d - (a @ proj1.means2d[..., None])[..., 0]
    vis = proj2.visible[:, None].to(DTYPE)
    return torch.cat([a.reshape(-1, 4), b, torch.ones_like(vis)], 1) * vis


def flow_from_blend(blended: torch.Tensor) -> FlowField:
    """``sum_i w_i (A_i x + b_i) / sum_i w_i - x`` from a blended ``(H, W, 7)`` transport.

    The normalizer is the blended visibility channel, i.e. the weight of the
    contributors that still exist at t2, so a pixel whose Gaussians all move
    by ``d`` has flow exactly ``d``.  Pixels where that weight is below
    ``ALPHA_VALID`` are invalid.
    """
    h, w = blended.shape[:2]
    x = pixel_grid(w, h)
    mass = blended[..., 6]
    valid = mass.detach() >= ALPHA_VALID
    safe = torch.where(valid, mass, torch.ones_like(mass))[..., None]
    a = blended[..., :4].reshape(h, w, 2, 2)
    flow = ((a @ x[..., None])[..., 0] + blended[..., 4:6]) / safe - x
    return FlowField(flow, valid)


def full_flow(proj1: Projected, proj2: Projected, weights: Composite) -> FlowField:
    """Blend each contributor's affine transport ``Sigma2 Sigma1^-1 (x - mu1) + mu2 - x``
    with normalized weights ``w_i / sum_j w_j``.

    ``weights`` come from the t1 compositing pass.  Gaussians invisible at t2
    are left out of both the sum and the normalizer.
    """
    if len(proj1) != len(proj2):
        raise CorrespondenceError(f"{len(proj1)} Gaussians at t1 but {len(proj2)} at t2")
    if len(proj1) == 0:
        w, h = weights.width, weights.height
        return FlowField(torch.zeros(h, w, 2, dtype=DTYPE), torch.zeros(h, w, dtype=torch.bool))
    used = torch.zeros(len(proj1), dtype=torch.bool)
    used[weights.index[weights.valid]] = True
    return flow_from_blend(blend(weights, transport_payload(proj1, proj2, used)))


def camera_flow(depth1: torch.Tensor, valid1: torch.Tensor, cam1: Camera, cam2: Camera) -> FlowField:
    """Back-project the t1 depth, reproject into ``cam2``; behind-camera pixels are invalid."""
    h, w = depth1.shape
    grid = pixel_grid(w, h)
    safe = torch.where(valid1, depth1, torch.ones_like(depth1))
    x = back_project(grid, safe, cam1, check=False)
    p2, z2 = project(x, cam2, check=False)
    valid = valid1 & (z2.detach() > NEAR_PLANE)
    p2 = torch.where(valid[..., None], p2, grid)
    return FlowField(p2 - grid, valid)


def scene_flow_pipeline(model, cam1: Camera, cam2: Camera, static=None):
    """(F_full, F_cam, t1 render) for a scene model evaluated at both timestamps.

    ``static`` optionally passes precomputed decoded static Gaussians so they
    are evaluated once per step.  Color, depth and the transport payload are
    blended in a single compositing pass.
    """
    if static is None:
        static = model.static_gaussians()
    g1 = model.gaussians_at(cam1.timestamp, static)
    g2 = g1 if cam2.timestamp == cam1.timestamp else model.gaussians_at(cam2.timestamp, static)
    proj1 = project_gaussians(g1, cam1)
    proj2 = project_gaussians(g2, cam2)
    r1, blended = render_projected(g1, proj1, cam1, extra=transport_payload(proj1, proj2))
    f_full = flow_from_blend(blended)
    f_cam = camera_flow(r1.depth, r1.depth_valid, cam1, cam2)
    return f_full, f_cam, r1
