"""Flow warping, photometric terms and the self-supervised training objective."""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError, EmptySupportError, NumericalFailure
from .geometry import DTYPE

SSIM_SIZE = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

LOSS_TERMS = ("L_baseline", "L_mc", "L_cr", "L_mc_cam", "L_cr_cam", "total")


def as_image(x) -> torch.Tensor:
    """``(H, W, 3)`` float64 image clamped to ``[0, 1]``."""
    t = torch.as_tensor(x, dtype=DTYPE)
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {tuple(t.shape)}")
    if not bool(torch.isfinite(t).all()):
        raise ValueError("image has non-finite values")
    return t.clamp(0.0, 1.0)


# --------------------------------------------------------------------------- warping


def bilinear(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor):
    """Sample ``img (H, W, C)`` at continuous positions; returns (values, inside)."""
    h, w = img.shape[:2]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = torch.where(inside, x, torch.zeros_like(x))
    ys = torch.where(inside, y, torch.zeros_like(y))
    with torch.no_grad():
        x0 = torch.clamp(torch.floor(xs), 0, max(w - 2, 0)).long()
        y0 = torch.clamp(torch.floor(ys), 0, max(h - 2, 0)).long()
    x1 = torch.clamp(x0 + 1, max=w - 1)
    y1 = torch.clamp(y0 + 1, max=h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    out = (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )
    return torch.where(inside[..., None], out, torch.zeros_like(out)), inside


def warp(target: torch.Tensor, flow) -> tuple[torch.Tensor, torch.Tensor]:
    """Backward warp: ``out(x) = target(x + flow(x))``; returns (image, coverage).

    Uncovered pixels (invalid flow or sample outside the image) are zero.
    """
    h, w = target.shape[:2]
    disp = flow.flow
    if disp.shape[:2] != (h, w):
        raise ValueError("flow and target sizes differ")
    v, u = torch.meshgrid(torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij")
    out, inside = bilinear(target, u + disp[..., 0], v + disp[..., 1])
    cov = inside & flow.valid
    return torch.where(cov[..., None], out, torch.zeros_like(out)), cov


# --------------------------------------------------------------------------- photometric


def _kernel() -> torch.Tensor:
    r = SSIM_SIZE // 2
    g = torch.tensor([math.exp(-((i - r) ** 2) / (2 * SSIM_SIGMA**2)) for i in range(SSIM_SIZE)], dtype=DTYPE)
    return g / g.sum()


@functools.lru_cache(maxsize=16)
def _band(n: int) -> torch.Tensor:
    """``(n, n)`` matrix applying the 1-D window with zero padding."""
    g = _kernel()
    r = SSIM_SIZE // 2
    i = torch.arange(n)
    off = i[None, :] - i[:, None] + r
    ok = (off >= 0) & (off < SSIM_SIZE)
    return torch.where(ok, g[off.clamp(0, SSIM_SIZE - 1)], torch.zeros((), dtype=DTYPE))


def gaussian_blur(x: torch.Tensor) -> torch.Tensor:
    """Separable 11-tap Gaussian blur of ``(..., H, W)`` maps with zero padding."""
    h, w = x.shape[-2:]
    return _band(h) @ x @ _band(w).T


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM averaged over channels, Gaussian window with zero padding; ``(H, W)``."""
    if a.shape != b.shape:
        raise ValueError("ssim inputs differ in shape")
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    mx, my, xx, yy, xy = gaussian_blur(torch.stack([x, y, x * x, y * y, x * y]))
    vx = xx - mx * mx
    vy = yy - my * my
    cxy = xy - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return (num / den).mean(0)


def photometric(a: torch.Tensor, b: torch.Tensor, mask=None, lambda_dssim: float = 0.2) -> torch.Tensor:
    """``(1 - l) L1 + l (1 - SSIM)`` evaluated on ``mask`` pixels.

    Outside the mask ``b`` is replaced by ``a`` so that SSIM windows straddling
    the mask boundary see no fabricated content from ``b``.
    """
    if a.shape != b.shape:
        raise ValueError("photometric inputs differ in shape")
    if mask is None:
        mask = torch.ones(a.shape[:2], dtype=torch.bool)
    if not bool(mask.any()):
        raise EmptySupportError("photometric loss over an empty mask")
    l1 = (a - b).abs()[mask].mean()
    if lambda_dssim == 0:
        return l1
    bf = torch.where(mask[..., None], b, a)
    s = ssim_map(a, bf)[mask].mean()
    return (1 - lambda_dssim) * l1 + lambda_dssim * (1 - s)


# --------------------------------------------------------------------------- objective


@dataclass
class LossWeights:
    lambda_mc: float = 1.0
    lambda_cr: float = 0.1
    lambda_mc_cam: float = 1.0
    lambda_cr_cam: float = 0.1
    lambda_ff: float = 5.0
    lambda_cf: float = 0.3
    lambda_dssim: float = 0.2
    lambda_tv: float = 1e-4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{k} must be a finite nonnegative number")

    @classmethod
    def preset(cls, name: str, **overrides) -> "LossWeights":
        """``simple`` (strong flow weights) or ``complex`` motion; cross-time terms at 0.1x."""
        table = {"simple": (5.0, 0.3), "complex": (1.0, 0.1)}
        if name not in table:
            raise ConfigError(f"unknown preset {name!r}")
        ff, cf = table[name]
        w = dict(lambda_ff=ff, lambda_cf=cf, lambda_mc=1.0, lambda_cr=0.1, lambda_mc_cam=1.0, lambda_cr_cam=0.1)
        w.update(overrides)
        return cls(**w)


def full_flow_losses(i1, i2, render1, f_full, lambda_dssim: float = 0.2):
    """(L_mc, L_cr) from warping the real second frame along the full flow."""
    warped, cov = warp(i2, f_full)
    if not bool(cov.any()):
        raise EmptySupportError("full flow covers no pixel")
    l_mc = photometric(i1, warped, cov, lambda_dssim)
    l_cr = photometric(render1.color, warped, cov, lambda_dssim)
    return l_mc, l_cr


def camera_flow_losses(i1, i2, render1, f_cam, static_mask, lambda_dssim: float = 0.2):
    """(L_mc_cam, L_cr_cam, empty) restricted to static pixels; zeros and ``empty=True``
    when no static pixel is covered."""
    warped, cov = warp(i2, f_cam)
    mask = cov & torch.as_tensor(static_mask, dtype=torch.bool)
    zero = torch.zeros((), dtype=DTYPE)
    if not bool(mask.any()):
        return zero, zero, True
    l_mc = photometric(i1, warped, mask, lambda_dssim)
    l_cr = photometric(render1.color, warped, mask, lambda_dssim)
    return l_mc, l_cr, False


@dataclass
class LossBreakdown:
    L_baseline: torch.Tensor
    L_mc: torch.Tensor
    L_cr: torch.Tensor
    L_mc_cam: torch.Tensor
    L_cr_cam: torch.Tensor
    total: torch.Tensor
    camflow_empty: bool = False

    def row(self) -> list[float]:
        return [float(getattr(self, k).detach()) for k in LOSS_TERMS]


def total_loss(
    i1,
    render1,
    smoothness,
    weights: LossWeights,
    i2=None,
    f_full=None,
    f_cam=None,
    static_mask=None,
    use_full: bool = True,
    use_cam: bool = True,
    baseline_mask=None,
) -> LossBreakdown:
    """Assemble the objective from a t1 render and (optionally) the two flows.

    Flow branches are evaluated only when their outer weight is positive and the
    branch is enabled, so a zero weight yields exactly the baseline.
    ``baseline_mask`` restricts the rendering term (all pixels by default).
    """
    zero = torch.zeros((), dtype=DTYPE)
    base = photometric(render1.color, i1, baseline_mask, weights.lambda_dssim) + weights.lambda_tv * smoothness
    l_mc = l_cr = l_mcc = l_crc = zero
    empty = False
    if use_full and weights.lambda_ff > 0:
        l_mc, l_cr = full_flow_losses(i1, i2, render1, f_full, weights.lambda_dssim)
    if use_cam and weights.lambda_cf > 0:
        l_mcc, l_crc, empty = camera_flow_losses(i1, i2, render1, f_cam, static_mask, weights.lambda_dssim)
    total = (
        base
        + weights.lambda_ff * (weights.lambda_mc * l_mc + weights.lambda_cr * l_cr)
        + weights.lambda_cf * (weights.lambda_mc_cam * l_mcc + weights.lambda_cr_cam * l_crc)
    )
    out = LossBreakdown(base, l_mc, l_cr, l_mcc, l_crc, total, empty)
    for k in LOSS_TERMS:
        if not bool(torch.isfinite(getattr(out, k))):
            raise NumericalFailure(k, f"loss term {k} is not finite")
    return out
