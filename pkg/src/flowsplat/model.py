"""The trainable scene: explicit canonical Gaussians plus the feature field.

Parameters live in named groups (a plain mapping of tensors) so the optimizer,
the freeze contract and the checkpoint format all see the same layout.
Static Gaussians are stored first, dynamic ones after them.
"""
from __future__ import annotations

import math
from collections.abc import Mapping

import numpy as np
import torch
from scipy.spatial import cKDTree

from .field import FeatureField, FieldConfig, decode_dynamic, decode_static, padded_bounds, temporal_smoothness
from .geometry import DTYPE
from .splat import SH_C0, Gaussians

GAUSSIAN_GROUPS = (
    "gaussian_means",
    "gaussian_rotations",
    "gaussian_scales",
    "gaussian_opacities",
    "gaussian_colors",
)
FIELD_GROUPS = ("spatial_planes", "temporal_planes", "static_decoder", "dynamic_decoder")
GROUPS = GAUSSIAN_GROUPS + FIELD_GROUPS
DEFORMATION_GROUPS = ("temporal_planes", "dynamic_decoder")


def knn_scale(points: np.ndarray, k: int = 3, floor: float = 1e-4) -> np.ndarray:
    """Mean distance to the ``k`` nearest neighbours, the usual splat size seed."""
    n = len(points)
    if n < 2:
        return np.full(n, 0.05)
    kk = min(k, n - 1)
    d, _ = cKDTree(points).query(points, kk + 1)
    return np.maximum(d[:, 1:].mean(1), floor)


class SceneModel:
    def __init__(self, params: Mapping[str, torch.Tensor], n_static: int, cfg: FieldConfig, bounds: torch.Tensor):
        self.params = params
        self.n_static = int(n_static)
        self.cfg = cfg
        self.bounds = torch.as_tensor(bounds, dtype=DTYPE)

    # ------------------------------------------------------------------ construction

    @classmethod
    def create(
        cls,
        static_points,
        static_colors,
        dynamic_points,
        dynamic_colors,
        cfg: FieldConfig | None = None,
        seed: int = 0,
        opacity: float = 0.5,
        scale_factor: float = 1.0,
        bounds=None,
    ) -> tuple[dict[str, torch.Tensor], "SceneModel"]:
        cfg = cfg or FieldConfig()
        sp = np.asarray(static_points, dtype=np.float64).reshape(-1, 3)
        dp = np.asarray(dynamic_points, dtype=np.float64).reshape(-1, 3)
        pts = np.concatenate([sp, dp])
        cols = np.concatenate(
            [np.asarray(static_colors, dtype=np.float64).reshape(-1, 3), np.asarray(dynamic_colors, dtype=np.float64).reshape(-1, 3)]
        )
        scales = np.concatenate([knn_scale(sp), knn_scale(dp)]) * scale_factor
        n = len(pts)
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        if bounds is None:
            bounds = padded_bounds(torch.as_tensor(pts, dtype=DTYPE))
        fld = FeatureField.create(cfg, bounds, dynamic=len(dp) > 0, seed=seed)
        params = {
            "gaussian_means": torch.as_tensor(pts, dtype=DTYPE),
            "gaussian_rotations": torch.as_tensor(quats, dtype=DTYPE),
            "gaussian_scales": torch.as_tensor(np.log(scales)[:, None].repeat(3, 1), dtype=DTYPE),
            "gaussian_opacities": torch.full((n,), math.log(opacity / (1 - opacity)), dtype=DTYPE),
            "gaussian_colors": torch.as_tensor((cols - 0.5) / SH_C0, dtype=DTYPE),
            "spatial_planes": fld.spatial,
            "static_decoder": fld.static_weights,
        }
        if fld.temporal is not None:
            params["temporal_planes"] = fld.temporal
            params["dynamic_decoder"] = fld.dynamic_weights
        return params, cls(params, len(sp), cfg, fld.bounds)

    # ------------------------------------------------------------------ evaluation

    @property
    def n_gaussians(self) -> int:
        return self.params["gaussian_means"].shape[0]

    @property
    def n_dynamic(self) -> int:
        return self.n_gaussians - self.n_static

    @property
    def is_dynamic(self) -> torch.Tensor:
        d = torch.zeros(self.n_gaussians, dtype=torch.bool)
        d[self.n_static :] = True
        return d

    def field(self) -> FeatureField:
        p = self.params
        return FeatureField(
            p["spatial_planes"],
            p.get("temporal_planes"),
            self.bounds,
            self.cfg.static_decoder(),
            self.cfg.dynamic_decoder(),
            p["static_decoder"],
            p.get("dynamic_decoder"),
        )

    def canonical(self) -> Gaussians:
        p = self.params
        return Gaussians(
            p["gaussian_means"],
            p["gaussian_scales"],
            p["gaussian_rotations"],
            p["gaussian_opacities"],
            p["gaussian_colors"],
            self.is_dynamic,
        )

    def static_gaussians(self, fld: FeatureField | None = None) -> Gaussians:
        fld = fld or self.field()
        return decode_static(self.canonical().subset(slice(0, self.n_static)), fld)

    def dynamic_gaussians(self, t: float, fld: FeatureField | None = None) -> Gaussians:
        fld = fld or self.field()
        base = self.canonical().subset(slice(self.n_static, None))
        if self.n_dynamic == 0:
            return base
        return decode_dynamic(base, t, fld)

    def gaussians_at(self, t: float, static: Gaussians | None = None) -> Gaussians:
        fld = self.field()
        static = static if static is not None else self.static_gaussians(fld)
        if self.n_dynamic == 0:
            return static
        return Gaussians.cat([static, self.dynamic_gaussians(t, fld)])

    def smoothness(self) -> torch.Tensor:
        return temporal_smoothness(self.params.get("temporal_planes"))
