"""Tri-plane / hex-plane feature fields and the attribute decoders.

Static Gaussians query the three spatial planes (xy, xz, yz); dynamic
Gaussians additionally query the space-time planes (xt, yt, zt).  Features are
concatenated and fed through small MLPs.  Decoder outputs are residuals added
to each Gaussian's own canonical (pre-activation) attributes, so a decoder
with a zero output layer reproduces the canonical Gaussians exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError
from .geometry import DTYPE
from .splat import Gaussians

SPATIAL_AXES = ("xy", "xz", "yz")
TEMPORAL_AXES = ("xt", "yt", "zt")
_AXIS = {"x": 0, "y": 1, "z": 2}

ROW_BLOCK = 64  # rows per partial sum in the decoder weight gradients


class _RowLinear(torch.autograd.Function):
    """``x @ w + b`` whose parameter gradients sum over rows in a fixed order.

    A plain matmul backward reduces over all rows inside BLAS, which splits
    that reduction by thread count.  Here each block of ``ROW_BLOCK`` rows is
    reduced on its own and the blocks are folded left to right, so the
    gradients are bit-identical for any thread count.
    """

    @staticmethod
    def forward(ctx, x, w, b):
        ctx.save_for_backward(x, w)
        return x @ w + b

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.saved_tensors
        gx = g @ w.T
        x2, g2 = x.reshape(-1, x.shape[-1]), g.reshape(-1, g.shape[-1])
        ones = torch.ones(len(x2), 1, dtype=x2.dtype)
        xa = torch.cat([x2, ones], 1)
        pad = -len(xa) % ROW_BLOCK
        if pad:
            xa = torch.cat([xa, xa.new_zeros(pad, xa.shape[1])])
            g2 = torch.cat([g2, g2.new_zeros(pad, g2.shape[1])])
        xb = xa.view(-1, ROW_BLOCK, xa.shape[1])
        gb = g2.view(-1, ROW_BLOCK, g2.shape[1])
        parts = torch.bmm(xb.transpose(1, 2), gb)
        acc = parts[0].clone()
        for p in parts[1:]:
            acc += p
        return gx, acc[:-1], acc[-1]


STATIC_HEADS = {"dmu": 3, "dq": 4, "ds": 3, "dsigma": 1, "dc": 3}
DYNAMIC_HEADS = {"dmu": 3, "dq": 4}


@dataclass(frozen=True)
class DecoderSpec:
    """Fully connected layers with SiLU between them, plus named output slices."""

    layers: tuple[tuple[int, int], ...]
    heads: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for (_, o), (i, _) in zip(self.layers[:-1], self.layers[1:]):
            if o != i:
                raise ConfigError("decoder layer sizes do not chain")
        if sum(self.heads.values()) != self.layers[-1][1]:
            raise ConfigError("head sizes must sum to the decoder output size")
        if self.heads.get("dmu", 3) != 3 or self.heads.get("dq", 4) != 4:
            raise ConfigError("position head must be 3-d and rotation head 4-d")

    @classmethod
    def mlp(cls, in_dim: int, hidden: int, depth: int, heads: dict[str, int]) -> "DecoderSpec":
        dims = [in_dim] + [hidden] * depth + [sum(heads.values())]
        return cls(tuple(zip(dims[:-1], dims[1:])), dict(heads))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layers)

    def unflatten(self, flat: torch.Tensor):
        out, k = [], 0
        for i, o in self.layers:
            w = flat[k : k + i * o].view(i, o)
            k += i * o
            b = flat[k : k + o]
            k += o
            out.append((w, b))
        return out

    def init(self, generator: torch.Generator) -> torch.Tensor:
        """He-style init for hidden layers; the output layer starts at zero."""
        parts = []
        for n, (i, o) in enumerate(self.layers):
            if n == len(self.layers) - 1:
                parts += [torch.zeros(i * o, dtype=DTYPE), torch.zeros(o, dtype=DTYPE)]
            else:
                w = torch.randn(i * o, generator=generator, dtype=DTYPE) * math.sqrt(1.0 / i)
                parts += [w, torch.zeros(o, dtype=DTYPE)]
        return torch.cat(parts)

    def __call__(self, flat: torch.Tensor, x: torch.Tensor) -> dict[str, torch.Tensor]:
        layers = self.unflatten(flat)
        for n, (w, b) in enumerate(layers):
            x = _RowLinear.apply(x, w, b)
            if n < len(layers) - 1:
                x = torch.nn.functional.silu(x)
        out, k = {}, 0
        for name, size in self.heads.items():
            out[name] = x[..., k : k + size]
            k += size
        return out


@dataclass
class FeaturePlane:
    """One learnable ``(R1, R2, C)`` grid over an axis pair."""

    data: torch.Tensor
    axis_pair: str

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.data.shape[:2])

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def interp(plane, u, v) -> torch.Tensor:
    """Bilinear lookup of ``plane (R1, R2, C)`` at normalized ``(u, v)`` in ``[0, 1]^2``."""
    data = plane.data if isinstance(plane, FeaturePlane) else plane
    r1, r2 = data.shape[0], data.shape[1]
    u = torch.as_tensor(u, dtype=DTYPE).clamp(0.0, 1.0)
    v = torch.as_tensor(v, dtype=DTYPE).clamp(0.0, 1.0)
    gu, gv = u * (r1 - 1), v * (r2 - 1)
    i0 = torch.clamp(torch.floor(gu.detach()), max=r1 - 2).long()
    j0 = torch.clamp(torch.floor(gv.detach()), max=r2 - 2).long()
    fu = (gu - i0)[..., None]
    fv = (gv - j0)[..., None]
    return (
        data[i0, j0] * (1 - fu) * (1 - fv)
        + data[i0 + 1, j0] * fu * (1 - fv)
        + data[i0, j0 + 1] * (1 - fu) * fv
        + data[i0 + 1, j0 + 1] * fu * fv
    )


@dataclass
class FieldConfig:
    spatial_res: int = 64
    temporal_res: int = 32
    channels: int = 16
    hidden: int = 64
    hidden_layers: int = 2
    plane_init_std: float = 0.1

    def static_decoder(self) -> DecoderSpec:
        return DecoderSpec.mlp(3 * self.channels, self.hidden, self.hidden_layers, STATIC_HEADS)

    def dynamic_decoder(self) -> DecoderSpec:
        return DecoderSpec.mlp(6 * self.channels, self.hidden, self.hidden_layers, DYNAMIC_HEADS)


@dataclass
class FeatureField:
    """Spatial planes ``(3, R, R, C)``, optional temporal planes ``(3, R, T, C)``,
    the normalizing box, and the two decoders with their flat weight vectors."""

    spatial: torch.Tensor
    temporal: torch.Tensor | None
    bounds: torch.Tensor  # (2, 3): lo, hi
    static_decoder: DecoderSpec
    dynamic_decoder: DecoderSpec
    static_weights: torch.Tensor
    dynamic_weights: torch.Tensor | None

    def __post_init__(self):
        ext = self.bounds[1] - self.bounds[0]
        if bool(torch.any(ext <= 0)):
            raise ConfigError("field bounds must have positive extent on every axis")

    @classmethod
    def create(cls, cfg: FieldConfig, bounds, dynamic: bool = True, seed: int = 0) -> "FeatureField":
        gen = torch.Generator().manual_seed(seed)
        c, r = cfg.channels, cfg.spatial_res
        spatial = torch.randn(3, r, r, c, generator=gen, dtype=DTYPE) * cfg.plane_init_std
        temporal = None
        if dynamic:
            temporal = torch.randn(3, r, cfg.temporal_res, c, generator=gen, dtype=DTYPE) * cfg.plane_init_std
        sdec, ddec = cfg.static_decoder(), cfg.dynamic_decoder()
        return cls(
            spatial,
            temporal,
            torch.as_tensor(bounds, dtype=DTYPE),
            sdec,
            ddec,
            sdec.init(gen),
            ddec.init(gen) if dynamic else None,
        )

    def planes(self) -> list[FeaturePlane]:
        out = [FeaturePlane(self.spatial[k], a) for k, a in enumerate(SPATIAL_AXES)]
        if self.temporal is not None:
            out += [FeaturePlane(self.temporal[k], a) for k, a in enumerate(TEMPORAL_AXES)]
        return out

    def normalize(self, p: torch.Tensor) -> torch.Tensor:
        lo, hi = self.bounds[0], self.bounds[1]
        return ((p - lo) / (hi - lo)).clamp(0.0, 1.0)

    def spatial_features(self, p: torch.Tensor) -> torch.Tensor:
        q = self.normalize(p)
        feats = []
        for k, axes in enumerate(SPATIAL_AXES):
            a, b = _AXIS[axes[0]], _AXIS[axes[1]]
            feats.append(interp(self.spatial[k], q[..., a], q[..., b]))
        return torch.cat(feats, -1)

    def temporal_features(self, p: torch.Tensor, t) -> torch.Tensor:
        if self.temporal is None:
            raise ConfigError("field has no temporal planes")
        q = self.normalize(p)
        tt = torch.as_tensor(t, dtype=DTYPE).expand(q.shape[:-1])
        feats = []
        for k, axes in enumerate(TEMPORAL_AXES):
            feats.append(interp(self.temporal[k], q[..., _AXIS[axes[0]]], tt))
        return torch.cat(feats, -1)


def _normalize_quat(q: torch.Tensor) -> torch.Tensor:
    return q / torch.linalg.norm(q, dim=-1, keepdim=True)


def decode_static(base: Gaussians, fld: FeatureField) -> Gaussians:
    """Time-invariant attributes of static Gaussians queried at their canonical means."""
    p = base.means
    h = fld.static_decoder(fld.static_weights, fld.spatial_features(p))
    return Gaussians(
        p + h["dmu"],
        base.log_scales + h["ds"],
        _normalize_quat(base.quats + h["dq"]),
        base.opacity_logits + h["dsigma"][..., 0],
        base.colors + h["dc"],
        base.is_dynamic,
    )


def decode_dynamic(base: Gaussians, t, fld: FeatureField) -> Gaussians:
    """Position and rotation of dynamic Gaussians at time ``t``; the rest stays canonical."""
    if fld.temporal is None or fld.dynamic_weights is None:
        raise ConfigError("decode_dynamic needs temporal planes and a dynamic decoder")
    p = base.means
    feats = torch.cat([fld.spatial_features(p), fld.temporal_features(p, t)], -1)
    h = fld.dynamic_decoder(fld.dynamic_weights, feats)
    return Gaussians(
        p + h["dmu"],
        base.log_scales,
        _normalize_quat(base.quats + h["dq"]),
        base.opacity_logits,
        base.colors,
        base.is_dynamic,
    )


def temporal_smoothness(temporal: torch.Tensor | None) -> torch.Tensor:
    """Mean squared difference of time-adjacent temporal-plane entries."""
    if temporal is None or temporal.shape[2] < 2:
        return torch.zeros((), dtype=DTYPE)
    return ((temporal[:, :, 1:] - temporal[:, :, :-1]) ** 2).mean()


def padded_bounds(points: torch.Tensor, pad: float = 0.05) -> torch.Tensor:
    """Axis-aligned box of ``points`` grown by ``pad`` of its extent on every side."""
    lo, hi = points.min(0).values, points.max(0).values
    ext = torch.clamp(hi - lo, min=1e-3)
    return torch.stack([lo - pad * ext, hi + pad * ext])
