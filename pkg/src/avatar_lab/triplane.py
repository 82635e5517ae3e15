"""Parametric triplane types, static/dynamic fusion, and feature sampling.

The stored tensor is ``P x H x W x C`` with four plane groups: groups 0-2 are
the canonical static XY/XZ/YZ feature planes, group 3 holds the UV-space
neural texture that the mesh rasterizer consumes. :func:`fuse` splats the
texture over each canonical plane through the current mesh and overwrites the
static content only where the splat covers, producing the three-plane stack
the volume renderer samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io
from .geometry import PLANE_AXES, HeadMesh, rasterize_uv_texture

STATIC_GROUPS = (0, 1, 2)
TEXTURE_GROUP = 3


@dataclass
class NeuralTexture:
    """Per-UV feature map carried by the mesh; channels match the triplane."""

    texels: torch.Tensor  # (U, U, C)

    def __post_init__(self):
        if self.texels.ndim != 3 or self.texels.shape[0] != self.texels.shape[1]:
            raise ValueError(f"texels must be U x U x C, got {tuple(self.texels.shape)}")


def default_static_mask(plane_groups: int = 4) -> np.ndarray:
    mask = np.zeros(plane_groups, dtype=bool)
    mask[list(STATIC_GROUPS)] = True
    return mask


@dataclass
class ParametricTriplane:
    planes: torch.Tensor  # (P, H, W, C)
    static_mask: np.ndarray = field(default_factory=default_static_mask)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.planes.ndim != 4:
            raise ValueError(f"planes must be P x H x W x C, got {tuple(self.planes.shape)}")
        if self.planes.shape[0] < 4:
            raise ValueError("need at least 4 plane groups (3 static + 1 texture)")
        if not torch.isfinite(self.planes).all():
            raise ValueError("triplane contains non-finite values")

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[-1]


@dataclass
class RenderableTriplane:
    """Three axis-aligned planes produced by :func:`fuse`."""

    planes: torch.Tensor  # (3, H, W, C)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ValueError(f"planes must be 3 x H x W x C, got {tuple(self.planes.shape)}")

    @property
    def channels(self) -> int:
        return self.planes.shape[-1]


def texture_from_triplane(tri: ParametricTriplane) -> NeuralTexture:
    return NeuralTexture(texels=tri.planes[TEXTURE_GROUP])


def fuse(
    tri: ParametricTriplane,
    mesh: HeadMesh,
    texture: NeuralTexture | None = None,
    cache: bool = True,
) -> RenderableTriplane:
    """Deform the dynamic component over the static planes.

    For each canonical plane, the mesh is rasterized orthographically and the
    texture value replaces the static content exactly where the coverage mask
    is set; uncovered texels keep the static planes bitwise.
    """
    texture = texture or texture_from_triplane(tri)
    if texture.texels.shape[-1] != tri.channels:
        raise ValueError(
            f"texture channels {texture.texels.shape[-1]} != triplane channels {tri.channels}"
        )
    res = tri.resolution
    out = []
    for k, axis in enumerate(PLANE_AXES):
        dyn, mask = rasterize_uv_texture(mesh, texture, axis, res, cache=cache)
        static = tri.planes[STATIC_GROUPS[k]]
        out.append(torch.where(mask[..., None], dyn.to(static.dtype), static))
    return RenderableTriplane(
        planes=torch.stack(out, dim=0),
        provenance={
            "source": tri.meta.get("identity_seed"),
            "domain_tag": tri.meta.get("domain_tag"),
            "expression": [float(e) for e in mesh.expression],
        },
    )


def _sample_plane(plane: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of a (H, W, C) plane at world coords in [-1, 1]^2.

    Texel centres sit at ``-1 + (2 i + 1) / H``; out-of-range coordinates
    clamp to the border texel. The lerp arithmetic order here is the
    reference: the batched path must match a scalar loop bit for bit, so
    only the gather mechanism (flat index_select) is vectorized.
    """
    H, W = plane.shape[0], plane.shape[1]
    ai = ((a + 1.0) * (H / 2.0) - 0.5).clamp(0.0, float(H - 1))
    bi = ((b + 1.0) * (W / 2.0) - 0.5).clamp(0.0, float(W - 1))
    i0 = ai.floor()
    j0 = bi.floor()
    fi = (ai - i0)[..., None]
    fj = (bi - j0)[..., None]
    i0 = i0.long()
    j0 = j0.long()
    i1 = (i0 + 1).clamp(max=H - 1)
    j1 = (j0 + 1).clamp(max=W - 1)
    flat = plane.reshape(H * W, -1)
    v00 = flat.index_select(0, i0 * W + j0)
    v01 = flat.index_select(0, i0 * W + j1)
    v10 = flat.index_select(0, i1 * W + j0)
    v11 = flat.index_select(0, i1 * W + j1)
    return (v00 * (1 - fi) + v10 * fi) * (1 - fj) + (v01 * (1 - fi) + v11 * fi) * fj


def batch_sample(tri: RenderableTriplane, points: torch.Tensor, agg: str = "mean") -> torch.Tensor:
    """Project points onto XY/XZ/YZ, bilinear-sample each, aggregate.

    Accepts (N, 3) points (N may be 0); border-clamps coordinates outside
    [-1, 1]. Aggregation is ``mean`` (default) or ``sum``.
    """
    points = torch.as_tensor(points, dtype=tri.planes.dtype)
    if points.ndim != 2 or points.shape[-1] != 3:
        raise ValueError(f"points must be N x 3, got {tuple(points.shape)}")
    if not torch.isfinite(points).all():
        raise ValueError("points must be finite")
    if points.shape[0] == 0:
        return torch.zeros((0, tri.channels), dtype=tri.planes.dtype)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    f_xy = _sample_plane(tri.planes[0], x, y)
    f_xz = _sample_plane(tri.planes[1], x, z)
    f_yz = _sample_plane(tri.planes[2], y, z)
    total = f_xy + f_xz + f_yz
    if agg == "mean":
        return total / 3
    if agg == "sum":
        return total
    raise ValueError(f"unknown aggregation {agg!r}")


def sample_features(tri: RenderableTriplane, point, agg: str = "mean") -> torch.Tensor:
    point = torch.as_tensor(point, dtype=tri.planes.dtype).reshape(1, 3)
    return batch_sample(tri, point, agg=agg)[0]


def save_triplane(path: str | Path, tri: ParametricTriplane) -> None:
    io.write_triplane(path, tri.planes.detach().cpu().numpy(), meta=tri.meta)


def load_triplane(path: str | Path) -> ParametricTriplane:
    planes, meta = io.read_triplane(path)
    return ParametricTriplane(planes=torch.from_numpy(planes), meta=meta)
