"""Gaussian projection and front-to-back alpha compositing.

Compositing follows the 3DGS conventions: per-Gaussian alpha clamped to
0.99, contributions below 1/255 skipped, a pixel stops accumulating once its
transmittance would drop below 1e-4, and 0.3 px^2 of low-pass dilation is
added to every projected covariance.

Instead of tile binning, each Gaussian is culled to the pixels where its
alpha can reach 1/255, and every pixel's contributors are laid out in a padded
``(pixels, max_contributors)`` table sorted front to back.  All discrete
choices (sort order, culling, truncation) are made without gradient tracking;
the continuous quantities flowing through them are differentiable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import DegenerateGaussianError
from .geometry import DTYPE, NEAR_PLANE, Camera, as_tensor, quat_to_matrix

SH_C0 = 0.28209479177387814
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
DILATION = 0.3


@dataclass
class Gaussians:
    """A batch of 3D Gaussians stored as parallel arrays (pre-activation).

    ``colors`` holds degree-0 SH coefficients, one per RGB channel.
    """

    means: torch.Tensor  # (N, 3)
    log_scales: torch.Tensor  # (N, 3)
    quats: torch.Tensor  # (N, 4) w, x, y, z
    opacity_logits: torch.Tensor  # (N,)
    colors: torch.Tensor  # (N, 3)
    is_dynamic: torch.Tensor | None = None  # (N,) bool

    def __post_init__(self):
        if self.is_dynamic is None:
            self.is_dynamic = torch.zeros(len(self.means), dtype=torch.bool)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def rgb(self) -> torch.Tensor:
        return torch.clamp(SH_C0 * self.colors + 0.5, min=0.0)

    def covariances(self) -> torch.Tensor:
        r = quat_to_matrix(self.quats)
        s2 = torch.exp(2 * self.log_scales)
        return (r * s2[:, None, :]) @ r.transpose(1, 2)

    def subset(self, index) -> "Gaussians":
        return Gaussians(
            self.means[index],
            self.log_scales[index],
            self.quats[index],
            self.opacity_logits[index],
            self.colors[index],
            self.is_dynamic[index],
        )

    @staticmethod
    def cat(parts: list["Gaussians"]) -> "Gaussians":
        return Gaussians(
            torch.cat([p.means for p in parts]),
            torch.cat([p.log_scales for p in parts]),
            torch.cat([p.quats for p in parts]),
            torch.cat([p.opacity_logits for p in parts]),
            torch.cat([p.colors for p in parts]),
            torch.cat([p.is_dynamic for p in parts]),
        )

    @staticmethod
    def from_points(points, colors_rgb, scale, opacity: float = 0.5, dynamic: bool = False) -> "Gaussians":
        """Isotropic Gaussians centred on ``points`` with RGB colors in [0, 1]."""
        points = as_tensor(points)
        n = points.shape[0]
        scale = as_tensor(scale).expand(n) if as_tensor(scale).ndim == 0 else as_tensor(scale)
        quats = torch.zeros(n, 4, dtype=DTYPE)
        quats[:, 0] = 1.0
        return Gaussians(
            points.clone(),
            torch.log(scale)[:, None].repeat(1, 3),
            quats,
            torch.full((n,), math.log(opacity / (1 - opacity)), dtype=DTYPE),
            (as_tensor(colors_rgb) - 0.5) / SH_C0,
            torch.full((n,), dynamic, dtype=torch.bool),
        )


@dataclass
class Projected:
    """Screen-space Gaussians.  Invisible entries carry finite placeholders."""

    means2d: torch.Tensor  # (N, 2)
    cov2d: torch.Tensor  # (N, 2, 2)
    depth: torch.Tensor  # (N,)
    alpha_base: torch.Tensor  # (N,)
    visible: torch.Tensor  # (N,) bool

    def __len__(self) -> int:
        return self.means2d.shape[0]


def project_gaussians(g: Gaussians, camera: Camera, dilation: float = DILATION) -> Projected:
    """EWA projection ``cov2d = J W Sigma W^T J^T + dilation * I``."""
    k = camera.intrinsics
    rot, trans = camera.pose.rotation, camera.pose.translation
    pc = g.means @ rot.T + trans
    z = pc[:, 2]
    visible = (z > NEAR_PLANE).detach()
    zs = torch.where(visible, z, torch.ones_like(z))
    x, y = pc[:, 0], pc[:, 1]
    zero = torch.zeros_like(zs)
    jac = torch.stack(
        [
            torch.stack([k.fx / zs, zero, -k.fx * x / zs**2], -1),
            torch.stack([zero, k.fy / zs, -k.fy * y / zs**2], -1),
        ],
        -2,
    )
    m = jac @ rot
    cov = m @ g.covariances() @ m.transpose(1, 2)
    cov = cov + dilation * torch.eye(2, dtype=DTYPE)
    means2d = torch.stack([k.fx * x / zs + k.cx, k.fy * y / zs + k.cy], -1)
    return Projected(means2d, cov, z, g.opacities, visible)


def conics(cov2d: torch.Tensor) -> torch.Tensor:
    """Closed-form 2x2 inverse."""
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([torch.stack([c, -b], -1), torch.stack([-b, a], -1)], -2) / det[:, None, None]


def check_positive_definite(cov2d: torch.Tensor, mask: torch.Tensor | None = None):
    with torch.no_grad():
        c = cov2d if mask is None else cov2d[mask]
        det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] ** 2
        if bool(torch.any((det <= 1e-12) | (c[:, 0, 0] <= 0))):
            raise DegenerateGaussianError("projected covariance is not positive definite")


@dataclass
class Composite:
    """Per-pixel, front-to-back ordered contributor table.

    ``index[p, k]`` is the Gaussian blended k-th at flattened pixel ``p`` and
    ``weight[p, k]`` its blend weight ``w = alpha * T``; padding entries have
    weight 0 and index 0.
    """

    index: torch.Tensor  # (P, L) long
    weight: torch.Tensor  # (P, L)
    valid: torch.Tensor  # (P, L) bool, entry is a real contributor
    width: int
    height: int

    @property
    def alpha(self) -> torch.Tensor:
        return self.weight.sum(1).reshape(self.height, self.width)

    def pixel_weights(self, u: int, v: int) -> list[tuple[int, float]]:
        p = v * self.width + u
        keep = self.valid[p]
        return list(zip(self.index[p][keep].tolist(), self.weight[p][keep].tolist()))

    def signature(self) -> tuple:
        """Discrete state of the blend; equal signatures mean the same branch."""
        return (self.index[self.valid].tolist(), self.valid.sum(1).tolist())


def _cull(proj: Projected, width: int, height: int):
    """Candidate (gaussian, pixel) pairs whose alpha can reach 1/255."""
    with torch.no_grad():
        a = proj.alpha_base
        ok = proj.visible & (a * 255.0 > 1.0)
        cov = proj.cov2d
        tr = cov[:, 0, 0] + cov[:, 1, 1]
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
        lam = tr / 2 + torch.sqrt(torch.clamp(tr * tr / 4 - det, min=0.0))
        # alpha = a exp(-m/2) >= 1/255  requires  m <= 2 ln(255 a), and m >= d^2 / lam
        r = torch.sqrt(2 * torch.log(torch.clamp(a * 255.0, min=1.0)) * lam) + 1e-9
        mu = proj.means2d
        x0 = torch.ceil(mu[:, 0] - r).clamp(min=0)
        x1 = torch.floor(mu[:, 0] + r).clamp(max=width - 1)
        y0 = torch.ceil(mu[:, 1] - r).clamp(min=0)
        y1 = torch.floor(mu[:, 1] + r).clamp(max=height - 1)
        ok = ok & (x1 >= x0) & (y1 >= y0) & torch.isfinite(r)
        ids = torch.nonzero(ok).flatten()
        if ids.numel() == 0:
            return ids, ids
        x0, y0 = x0[ids].long(), y0[ids].long()
        bw = (x1[ids].long() - x0 + 1)
        bh = (y1[ids].long() - y0 + 1)
        counts = bw * bh
        gid = torch.repeat_interleave(ids, counts)
        offset = torch.arange(int(counts.sum()), dtype=torch.long) - torch.repeat_interleave(
            torch.cumsum(counts, 0) - counts, counts
        )
        bwr = torch.repeat_interleave(bw, counts)
        px = torch.repeat_interleave(x0, counts) + offset % bwr
        py = torch.repeat_interleave(y0, counts) + offset // bwr
        return gid, py * width + px


def _pair_alpha(proj: Projected, con: torch.Tensor, gid, pix, width: int) -> torch.Tensor:
    px = (pix % width).to(DTYPE)
    py = (pix // width).to(DTYPE)
    dx = px - proj.means2d[gid, 0]
    dy = py - proj.means2d[gid, 1]
    c = con[gid]
    maha = c[:, 0, 0] * dx * dx + 2 * c[:, 0, 1] * dx * dy + c[:, 1, 1] * dy * dy
    return proj.alpha_base[gid] * torch.exp(-0.5 * maha)


def composite(proj: Projected, width: int, height: int) -> Composite:
    """Build the sorted contributor table and blend weights."""
    check_positive_definite(proj.cov2d, proj.visible)
    n, npix = len(proj), width * height
    con = conics(proj.cov2d)
    gid, pix = _cull(proj, width, height)
    if gid.numel() == 0:
        empty = torch.zeros(npix, 1, dtype=DTYPE)
        return Composite(torch.zeros(npix, 1, dtype=torch.long), empty, empty.bool(), width, height)

    alpha = _pair_alpha(proj, con, gid, pix, width)
    with torch.no_grad():
        keep = alpha.detach() >= ALPHA_MIN
        gid, pix = gid[keep], pix[keep]
        # depth order, ties broken by Gaussian index (stable sort)
        order = torch.sort(proj.depth.detach(), stable=True).indices
        rank = torch.empty(n, dtype=torch.long)
        rank[order] = torch.arange(n)
        srt = torch.argsort(pix * n + rank[gid])
        gid, pix = gid[srt], pix[srt]
        counts = torch.bincount(pix, minlength=npix)
        starts = torch.cumsum(counts, 0) - counts
        slot = torch.arange(gid.numel()) - starts[pix]
        depth_max = max(int(counts.max()), 1)
    alpha = torch.clamp(_pair_alpha(proj, con, gid, pix, width), max=ALPHA_MAX)

    table = torch.zeros(npix, depth_max, dtype=DTYPE).index_put((pix, slot), alpha)
    index = torch.zeros(npix, depth_max, dtype=torch.long)
    index[pix, slot] = gid
    valid = torch.zeros(npix, depth_max, dtype=torch.bool)
    valid[pix, slot] = True

    trans_incl = torch.cumprod(1 - table, dim=1)
    trans_excl = torch.cat([torch.ones(npix, 1, dtype=DTYPE), trans_incl[:, :-1]], dim=1)
    with torch.no_grad():
        valid &= trans_incl >= T_MIN
    weight = table * trans_excl * valid
    return Composite(index, weight, valid, width, height)


def blend(comp: Composite, payload: torch.Tensor) -> torch.Tensor:
    """``sum_i w_i payload_i`` per pixel; returns ``(H, W, D)``."""
    if payload.shape[0] == 0:
        return torch.zeros(comp.height, comp.width, payload.shape[1], dtype=DTYPE)
    out = (comp.weight[..., None] * payload[comp.index]).sum(1)
    return out.reshape(comp.height, comp.width, -1)


def rasterize(proj: Projected, payloads: torch.Tensor, width: int, height: int):
    """Composite ``payloads (N, D)`` front to back; returns ``(Composite, image (H, W, D))``."""
    comp = composite(proj, width, height)
    return comp, blend(comp, payloads)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W), 0 where empty
    depth_valid: torch.Tensor  # (H, W) bool
    alpha: torch.Tensor  # (H, W)
    weights: Composite
    projected: Projected


def render(
    g: Gaussians,
    camera: Camera,
    background=(0.0, 0.0, 0.0),
    dilation: float = DILATION,
) -> RenderOutput:
    """Color, alpha-normalised depth and blend weights in one compositing pass."""
    proj = project_gaussians(g, camera, dilation)
    return render_projected(g, proj, camera, background)[0]


def render_projected(g: Gaussians, proj: Projected, camera: Camera, background=(0.0, 0.0, 0.0), extra=None):
    """Render already projected Gaussians; ``extra (N, D)`` payloads are blended
    in the same pass and returned as a second ``(H, W, D)`` value (or None)."""
    parts = [g.rgb(), proj.depth[:, None]]
    if extra is not None:
        parts.append(extra)
    comp, img = rasterize(proj, torch.cat(parts, dim=1), camera.width, camera.height)
    alpha = comp.alpha
    bg = as_tensor(background)
    color = img[..., :3] + (1 - alpha)[..., None] * bg
    depth_valid = (alpha > 1e-3).detach()
    safe = torch.where(depth_valid, alpha, torch.ones_like(alpha))
    depth = torch.where(depth_valid, img[..., 3] / safe, torch.zeros_like(alpha))
    out = RenderOutput(color, depth, depth_valid, alpha, comp, proj)
    return out, (img[..., 4:] if extra is not None else None)


render_color = render


def render_depth(g: Gaussians, camera: Camera, dilation: float = DILATION) -> tuple[torch.Tensor, torch.Tensor]:
    out = render(g, camera, dilation=dilation)
    return out.depth, out.depth_valid
