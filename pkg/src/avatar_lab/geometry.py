"""Cameras, rays, the synthetic parametric head mesh, and the UV rasterizer.

Conventions used throughout:

* World space is right-handed, ``+y`` up, and the head proxy faces ``+z``.
* A camera orbits ``look_at`` at distance ``radius``; ``yaw`` rotates about
  ``+y``, ``pitch`` elevates, ``roll`` spins about the view axis.
* Plane-space images are indexed ``[i, j]`` where ``i`` runs along the first
  named axis and ``j`` along the second; pixel ``i`` of an ``R``-wide image
  covers world coordinate ``-1 + (2 i + 1) / R`` at its centre.
* The rasterizer projects orthographically along the dropped axis, viewed
  from its negative side: the triangle with the smallest dropped coordinate
  wins the depth test. Triangles are double-sided, and a pixel is covered
  iff its centre lies inside (or on the boundary of) the triangle.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import GeometryConfig

PLANE_AXES = ("XY", "XZ", "YZ")
# (first axis, second axis, dropped axis) as world-coordinate indices.
_PLANE_COORDS = {"XY": (0, 1, 2), "XZ": (0, 2, 1), "YZ": (1, 2, 0)}

_WORLD_UP = np.array([0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# Cameras and rays
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraPose:
    pitch: float
    yaw: float
    roll: float
    radius: float
    fov: float
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not 0 < self.fov < math.pi:
            raise ValueError(f"fov must lie in (0, pi), got {self.fov}")
        object.__setattr__(self, "look_at", tuple(float(v) for v in self.look_at))

    def origin(self) -> np.ndarray:
        d = np.array(
            [
                math.cos(self.pitch) * math.sin(self.yaw),
                math.sin(self.pitch),
                math.cos(self.pitch) * math.cos(self.yaw),
            ]
        )
        return np.asarray(self.look_at) + self.radius * d

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors after roll."""
        origin = self.origin()
        forward = np.asarray(self.look_at) - origin
        forward = forward / np.linalg.norm(forward)
        side = np.cross(forward, _WORLD_UP)
        norm = np.linalg.norm(side)
        if norm < 1e-9:
            raise ValueError("camera forward axis is parallel to world up")
        side = side / norm
        up = np.cross(side, forward)
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        right = cr * side + sr * up
        up = -sr * side + cr * up
        return right, up, forward

    def to_dict(self) -> dict:
        return {
            "pitch": self.pitch,
            "yaw": self.yaw,
            "roll": self.roll,
            "radius": self.radius,
            "fov": self.fov,
            "look_at": list(self.look_at),
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraPose":
        return CameraPose(
            pitch=float(d["pitch"]),
            yaw=float(d["yaw"]),
            roll=float(d["roll"]),
            radius=float(d["radius"]),
            fov=float(d["fov"]),
            look_at=tuple(d.get("look_at", (0.0, 0.0, 0.0))),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit length, |d| = {norm}")
        if not self.t_near < self.t_far:
            raise ValueError(f"require t_near < t_far, got [{self.t_near}, {self.t_far}]")


@dataclass
class RayGrid:
    """Pinhole ray bundle; ``valid`` marks rays that intersect the volume."""

    origins: np.ndarray  # (R, R, 3)
    directions: np.ndarray  # (R, R, 3), unit
    t_near: np.ndarray  # (R, R)
    t_far: np.ndarray  # (R, R)
    valid: np.ndarray  # (R, R) bool

    @property
    def resolution(self) -> int:
        return self.origins.shape[0]

    def ray(self, i: int, j: int) -> Ray:
        if not self.valid[i, j]:
            raise ValueError(f"ray ({i}, {j}) misses the render volume")
        return Ray(
            origin=self.origins[i, j],
            direction=self.directions[i, j],
            t_near=float(self.t_near[i, j]),
            t_far=float(self.t_far[i, j]),
        )


def sample_camera_pose(rng: np.random.Generator, cfg: GeometryConfig) -> CameraPose:
    """Uniform pitch/yaw/roll inside the configured ranges; fixed radius/fov."""
    pitch = rng.uniform(cfg.pitch_range[0], cfg.pitch_range[1])
    yaw = rng.uniform(cfg.yaw_range[0], cfg.yaw_range[1])
    roll = rng.uniform(cfg.roll_range[0], cfg.roll_range[1])
    return CameraPose(
        pitch=pitch,
        yaw=yaw,
        roll=roll,
        radius=cfg.camera_radius,
        fov=cfg.fov,
        look_at=tuple(cfg.look_at),
    )


def generate_rays(pose: CameraPose, resolution: int, box_pad: float = 0.1) -> RayGrid:
    """Pinhole rays through pixel centres, bounded by the padded unit cube.

    Row index follows image rows (top row looks along +up) and the centre of
    the grid passes through ``look_at`` when roll is zero.
    """
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2 per side, got {resolution}")
    right, up, forward = pose.basis()
    origin = pose.origin()

    half = math.tan(pose.fov / 2.0)
    centers = (2.0 * (np.arange(resolution) + 0.5) / resolution) - 1.0
    x = centers[None, :] * half  # columns, left -> right
    y = -centers[:, None] * half  # rows, top -> bottom
    dirs = forward[None, None] + x[..., None] * right[None, None] + y[..., None] * up[None, None]
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)

    bound = 1.0 + box_pad
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    lo = (-bound - origin[None, None]) * inv
    hi = (bound - origin[None, None]) * inv
    tmin = np.minimum(lo, hi)
    tmax = np.maximum(lo, hi)
    # Axis-parallel rays: the slab test degenerates to +-inf, handled by min/max.
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_near = np.maximum(tmin.max(axis=-1), 1e-6)
    t_far = tmax.min(axis=-1)
    valid = t_far > t_near

    origins = np.broadcast_to(origin, dirs.shape).copy()
    t_near = np.where(valid, t_near, 0.0)
    t_far = np.where(valid, t_far, 0.0)
    return RayGrid(origins=origins, directions=dirs, t_near=t_near, t_far=t_far, valid=valid)


# ---------------------------------------------------------------------------
# Head mesh proxy
# ---------------------------------------------------------------------------


# Expression components displace the surface radially inside a Gaussian cap:
# (name, polar angle, azimuth, angular width). Names are mnemonic only; the
# displacement is linear in the expression coefficient.
EXPRESSION_REGIONS = (
    ("mouth_open", 2.10, 0.00, 0.45),
    ("jaw_left", 2.00, 0.55, 0.40),
    ("jaw_right", 2.00, -0.55, 0.40),
    ("brow_up", 1.05, 0.00, 0.40),
    ("cheek_left", 1.60, 0.80, 0.40),
    ("cheek_right", 1.60, -0.80, 0.40),
    ("forehead", 0.70, 0.00, 0.50),
    ("chin", 2.45, 0.00, 0.40),
)


@dataclass
class HeadMesh:
    """UV-parameterized triangle mesh with expression parameters."""

    vertices: np.ndarray  # (V, 3) float64
    uv: np.ndarray  # (V, 2) in [0, 1]^2
    faces: np.ndarray  # (F, 3) int64
    expression: np.ndarray  # (E,)
    identity_seed: int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.expression = np.asarray(self.expression, dtype=np.float64)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if self.faces.size and self.faces.min() < 0:
            raise ValueError("negative face index")
        if self.uv.size and (self.uv.min() < 0 or self.uv.max() > 1):
            raise ValueError("uv coordinates must lie in [0, 1]")

    def content_key(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.uv).tobytes())
        h.update(np.ascontiguousarray(self.faces).tobytes())
        return h.hexdigest()


def _unit_directions(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    st, ct = np.sin(theta), np.cos(theta)
    return np.stack([st * np.sin(phi), ct, st * np.cos(phi)], axis=-1)


def _identity_basis(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Eight smooth radial modes; azimuthal terms vanish at the poles."""
    st, ct = np.sin(theta), np.cos(theta)
    return np.stack(
        [
            ct,
            st * np.cos(phi),
            st * np.sin(phi),
            ct * ct - 1.0 / 3.0,
            st * st * np.cos(2 * phi),
            st * st * np.sin(2 * phi),
            st * ct * np.cos(phi),
            st * ct * np.sin(phi),
        ],
        axis=-1,
    )


def mesh_from_params(
    identity_seed: int, expression: np.ndarray, cfg: GeometryConfig | None = None
) -> HeadMesh:
    """Deterministic deformed-sphere head proxy.

    ``identity_seed`` selects low-frequency radial shape modes; each
    expression component bulges one fixed surface region (see
    :data:`EXPRESSION_REGIONS`) radially, linearly in the coefficient.
    """
    cfg = cfg or GeometryConfig()
    expression = np.asarray(expression, dtype=np.float64)
    if expression.shape != (cfg.expression_dim,):
        raise ValueError(
            f"expression must have shape ({cfg.expression_dim},), got {expression.shape}"
        )
    if cfg.expression_dim > len(EXPRESSION_REGIONS):
        raise ValueError("expression_dim exceeds the defined region table")

    n_lat, n_lon = cfg.mesh_lat, cfg.mesh_lon
    i = np.arange(n_lat + 1)
    j = np.arange(n_lon + 1)
    theta = math.pi * i / n_lat
    phi = 2.0 * math.pi * j / n_lon  # the seam column duplicates phi = 0 at u = 1
    tt, pp = np.meshgrid(theta, phi, indexing="ij")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(identity_seed), 0x6D657368])))
    coeffs = cfg.identity_scale * rng.standard_normal(8) / math.sqrt(8.0)
    rho = cfg.base_radius * (1.0 + _identity_basis(tt, pp) @ coeffs)

    dirs = _unit_directions(tt, pp)
    for k in range(cfg.expression_dim):
        _, th_c, ph_c, width = EXPRESSION_REGIONS[k]
        center = _unit_directions(np.array(th_c), np.array(ph_c))
        cosang = np.clip(dirs @ center, -1.0, 1.0)
        ang = np.arccos(cosang)
        rho = rho + cfg.expression_scale * expression[k] * np.exp(-0.5 * (ang / width) ** 2)
    rho = np.maximum(rho, 0.15 * cfg.base_radius)

    vertices = (rho[..., None] * dirs).reshape(-1, 3)
    u = (pp / (2.0 * math.pi)).reshape(-1)
    v = (tt / math.pi).reshape(-1)
    uv = np.stack([u, v], axis=-1)

    faces = []
    cols = n_lon + 1
    for a in range(n_lat):
        for b in range(n_lon):
            v00 = a * cols + b
            v01 = a * cols + b + 1
            v10 = (a + 1) * cols + b
            v11 = (a + 1) * cols + b + 1
            faces.append((v00, v10, v11))
            faces.append((v00, v11, v01))
    return HeadMesh(
        vertices=vertices,
        uv=uv,
        faces=np.asarray(faces, dtype=np.int64),
        expression=expression,
        identity_seed=int(identity_seed),
    )


def save_mesh(mesh: HeadMesh, path: str | Path) -> None:
    lines = [f"HEADMESH v1 {len(mesh.vertices)} {len(mesh.faces)} {len(mesh.expression)}"]
    for (x, y, z), (u, w) in zip(mesh.vertices, mesh.uv):
        lines.append(f"v {x:.17g} {y:.17g} {z:.17g} {u:.17g} {w:.17g}")
    for i, j, k in mesh.faces:
        lines.append(f"f {i} {j} {k}")
    lines.append("e " + " ".join(f"{e:.17g}" for e in mesh.expression))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mesh(path: str | Path) -> HeadMesh:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split()
    if head[:2] != ["HEADMESH", "v1"]:
        raise ValueError(f"{path}: not a HEADMESH v1 file")
    nverts, nfaces, edim = (int(x) for x in head[2:5])
    verts, uv, faces, expr = [], [], [], None
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:6]]
            verts.append(vals[:3])
            uv.append(vals[3:5])
        elif parts[0] == "f":
            faces.append([int(x) for x in parts[1:4]])
        elif parts[0] == "e":
            expr = [float(x) for x in parts[1:]]
    if len(verts) != nverts or len(faces) != nfaces or expr is None or len(expr) != edim:
        raise ValueError(f"{path}: HEADMESH counts do not match header")
    return HeadMesh(
        vertices=np.asarray(verts),
        uv=np.asarray(uv),
        faces=np.asarray(faces, dtype=np.int64),
        expression=np.asarray(expr),
        identity_seed=-1,
    )


# ---------------------------------------------------------------------------
# Orthographic UV rasterizer
# ---------------------------------------------------------------------------


@dataclass
class RasterMaps:
    """Pure-geometry rasterization result; texture-independent and cacheable."""

    mask: np.ndarray  # (R, R) bool
    face: np.ndarray  # (R, R) int64, -1 where uncovered
    uv: np.ndarray  # (R, R, 2)
    depth: np.ndarray  # (R, R), +inf where uncovered


def rasterize_uv_maps(mesh: HeadMesh, plane_axis: str, resolution: int) -> RasterMaps:
    """Depth-buffered coverage, winning face, and interpolated UV per pixel.

    Coverage uses the closed edge-function test (all three signed edge
    functions share a sign), so it agrees exactly with a per-pixel
    point-in-triangle check; ties in depth keep the earlier face.
    """
    if resolution < 1:
        raise ValueError("resolution must be positive")
    ia, ib, dropped = _PLANE_COORDS[plane_axis]
    R = resolution
    mask = np.zeros((R, R), dtype=bool)
    face_map = np.full((R, R), -1, dtype=np.int64)
    uv_map = np.zeros((R, R, 2))
    depth_map = np.full((R, R), np.inf)
    if len(mesh.faces) == 0:
        return RasterMaps(mask=mask, face=face_map, uv=uv_map, depth=depth_map)

    centers = -1.0 + (2.0 * np.arange(R) + 1.0) / R
    tri = mesh.vertices[mesh.faces]  # (F, 3, 3)
    a = tri[:, :, ia]
    b = tri[:, :, ib]
    z = tri[:, :, dropped]
    uv_vert = mesh.uv[mesh.faces]  # (F, 3, 2)

    # Pixel-index windows per face; pixel centre i sits at coordinate centers[i].
    lo_a = np.ceil((a.min(axis=1) + 1.0) * R / 2.0 - 0.5).astype(int)
    hi_a = np.floor((a.max(axis=1) + 1.0) * R / 2.0 - 0.5).astype(int)
    lo_b = np.ceil((b.min(axis=1) + 1.0) * R / 2.0 - 0.5).astype(int)
    hi_b = np.floor((b.max(axis=1) + 1.0) * R / 2.0 - 0.5).astype(int)

    for f in range(len(mesh.faces)):
        i0, i1 = max(lo_a[f], 0), min(hi_a[f], R - 1)
        j0, j1 = max(lo_b[f], 0), min(hi_b[f], R - 1)
        if i0 > i1 or j0 > j1:
            continue
        a0, a1, a2 = a[f]
        b0, b1, b2 = b[f]
        pa = centers[i0 : i1 + 1][:, None]
        pb = centers[j0 : j1 + 1][None, :]
        s0 = (a1 - a0) * (pb - b0) - (b1 - b0) * (pa - a0)
        s1 = (a2 - a1) * (pb - b1) - (b2 - b1) * (pa - a1)
        s2 = (a0 - a2) * (pb - b2) - (b0 - b2) * (pa - a2)
        den = s0 + s1 + s2
        inside = ((s0 >= 0) & (s1 >= 0) & (s2 >= 0)) | ((s0 <= 0) & (s1 <= 0) & (s2 <= 0))
        inside &= den != 0  # degenerate projected triangles cover nothing
        if not inside.any():
            continue
        w0 = np.where(inside, s1 / np.where(den == 0, 1.0, den), 0.0)
        w1 = np.where(inside, s2 / np.where(den == 0, 1.0, den), 0.0)
        w2 = 1.0 - w0 - w1
        zpix = w0 * z[f, 0] + w1 * z[f, 1] + w2 * z[f, 2]
        window = (slice(i0, i1 + 1), slice(j0, j1 + 1))
        closer = inside & (zpix < depth_map[window])
        if not closer.any():
            continue
        depth_map[window] = np.where(closer, zpix, depth_map[window])
        face_map[window] = np.where(closer, f, face_map[window])
        mask[window] |= closer
        u_pix = w0 * uv_vert[f, 0, 0] + w1 * uv_vert[f, 1, 0] + w2 * uv_vert[f, 2, 0]
        v_pix = w0 * uv_vert[f, 0, 1] + w1 * uv_vert[f, 1, 1] + w2 * uv_vert[f, 2, 1]
        uv_map[window][..., 0] = np.where(closer, u_pix, uv_map[window][..., 0])
        uv_map[window][..., 1] = np.where(closer, v_pix, uv_map[window][..., 1])
        mask[window] |= closer
    return RasterMaps(mask=mask, face=face_map, uv=uv_map, depth=depth_map)


_RASTER_CACHE: OrderedDict[tuple, RasterMaps] = OrderedDict()
_RASTER_CACHE_MAX = 256


def cached_raster_maps(mesh: HeadMesh, plane_axis: str, resolution: int) -> RasterMaps:
    key = (mesh.content_key(), plane_axis, resolution)
    maps = _RASTER_CACHE.get(key)
    if maps is None:
        maps = rasterize_uv_maps(mesh, plane_axis, resolution)
        _RASTER_CACHE[key] = maps
        while len(_RASTER_CACHE) > _RASTER_CACHE_MAX:
            _RASTER_CACHE.popitem(last=False)
    return maps


def bilinear_uv_lookup(texels: torch.Tensor, u: np.ndarray, v: np.ndarray) -> torch.Tensor:
    """Bilinear fetch from a (U, U, C) texture at uv in [0, 1]^2, border-clamped.

    Differentiable in the texel values; the sampling geometry is constant.
    """
    U = texels.shape[0]
    dtype = texels.dtype
    ui = np.clip(np.asarray(u) * U - 0.5, 0.0, U - 1.0)
    vi = np.clip(np.asarray(v) * texels.shape[1] - 0.5, 0.0, texels.shape[1] - 1.0)
    u0 = np.floor(ui).astype(np.int64)
    v0 = np.floor(vi).astype(np.int64)
    u1 = np.minimum(u0 + 1, U - 1)
    v1 = np.minimum(v0 + 1, texels.shape[1] - 1)
    fu = torch.as_tensor(ui - u0, dtype=dtype)
    fv = torch.as_tensor(vi - v0, dtype=dtype)
    u0t, u1t = torch.as_tensor(u0), torch.as_tensor(u1)
    v0t, v1t = torch.as_tensor(v0), torch.as_tensor(v1)
    t00 = texels[u0t, v0t]
    t01 = texels[u0t, v1t]
    t10 = texels[u1t, v0t]
    t11 = texels[u1t, v1t]
    fu = fu[..., None]
    fv = fv[..., None]
    return (t00 * (1 - fu) + t10 * fu) * (1 - fv) + (t01 * (1 - fu) + t11 * fu) * fv


def rasterize_uv_texture(
    mesh: HeadMesh,
    texture,
    plane_axis: str,
    resolution: int,
    cache: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Orthographic feature splat of ``texture`` over one canonical plane.

    ``texture`` is a (U, U, C) tensor or anything exposing ``.texels``.
    Returns the (R, R, C) feature image (zero outside coverage) and the
    boolean coverage mask. An empty mesh yields all-zero outputs.
    """
    texels = getattr(texture, "texels", texture)
    maps = cached_raster_maps(mesh, plane_axis, resolution) if cache else rasterize_uv_maps(
        mesh, plane_axis, resolution
    )
    mask_t = torch.as_tensor(maps.mask)
    features = torch.zeros(
        (resolution, resolution, texels.shape[-1]), dtype=texels.dtype
    )
    if maps.mask.any():
        idx = np.nonzero(maps.mask)
        sampled = bilinear_uv_lookup(texels, maps.uv[..., 0][idx], maps.uv[..., 1][idx])
        features = torch.index_put(features, (torch.as_tensor(idx[0]), torch.as_tensor(idx[1])), sampled)
    return features, mask_t
