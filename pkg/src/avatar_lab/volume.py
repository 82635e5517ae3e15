"""Hierarchical volume rendering over renderable triplanes.

Emission-absorption compositing runs in float64 internally so the
weights-plus-residual partition of unity holds to ~1e-14 regardless of the
working dtype. Every random draw a render needs (stratified jitter, then
importance uniforms) is taken up front from the caller's counter-based
stream in a fixed order, so per-ray parallelism cannot change results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .geometry import CameraPose, generate_rays
from .triplane import RenderableTriplane, batch_sample


@dataclass
class SamplingConfig:
    n_coarse: int = 48
    n_fine: int = 48
    stratified: bool = True
    render_resolution: int = 64

    def __post_init__(self):
        if self.n_coarse < 1 or self.n_fine < 1:
            raise ValueError("sample counts must be >= 1")
        if self.render_resolution < 2:
            raise ValueError("render_resolution must be >= 2")


@dataclass
class RenderOutput:
    feature_raw: torch.Tensor  # (R, R, F) composited features + background
    feature_image: torch.Tensor  # (2R, 2R, F) after the 2x upsampler
    rgb: torch.Tensor  # (2R, 2R, 3) bounded activation of the leading channels
    depth: torch.Tensor  # (R, R) expected depth under compositing weights
    opacity: torch.Tensor  # (R, R) in [0, 1]
    camera: CameraPose


class FeatureDecoder(nn.Module):
    """Two-hidden-layer perceptron: C -> 64 -> 64 -> (1 density + F features).

    The density channel passes through softplus; hidden activations are
    softplus as well so the render is smooth in the weights.
    """

    def __init__(self, channels: int, feature_dim: int = 8, hidden_dim: int = 64):
        super().__init__()
        self.channels = channels
        self.feature_dim = feature_dim
        self.net = nn.Sequential(
            nn.Linear(channels, hidden_dim),
            nn.Softplus(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.Softplus(),
            nn.Linear(hidden_dim, 1 + feature_dim),
        )

    @staticmethod
    def parameter_count(channels: int, feature_dim: int, hidden_dim: int = 64) -> int:
        return (
            (channels + 1) * hidden_dim
            + (hidden_dim + 1) * hidden_dim
            + (hidden_dim + 1) * (1 + feature_dim)
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(x)
        return F.softplus(out[..., 0]), out[..., 1:]


class Upsampler2x(nn.Module):
    """Learnable 2x upsampler: bilinear base plus a zero-initialized residual
    conv, so at initialization it reproduces bilinear upsampling exactly."""

    def __init__(self, channels: int):
        super().__init__()
        self.refine = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate")
        nn.init.zeros_(self.refine.weight)
        nn.init.zeros_(self.refine.bias)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """(H, W, C) -> (2H, 2W, C)."""
        x = img.permute(2, 0, 1)[None]
        base = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        out = base + self.refine(base)
        return out[0].permute(1, 2, 0)


def bilinear_upsample2x(img: torch.Tensor) -> torch.Tensor:
    x = img.permute(2, 0, 1)[None]
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)[0].permute(1, 2, 0)


def composite(
    densities: torch.Tensor, features: torch.Tensor, deltas: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Emission-absorption compositing along each ray.

    ``densities`` and ``deltas`` are (..., N), ``features`` is (..., N, F).
    Returns (feature (..., F), weights (..., N), residual transmittance
    (...,)); weights sum with the residual to 1 up to float error.
    """
    densities = torch.as_tensor(densities)
    features = torch.as_tensor(features)
    deltas = torch.as_tensor(deltas)
    if densities.shape != deltas.shape or features.shape[:-1] != densities.shape:
        raise ValueError("composite inputs disagree on the sample count")
    if densities.numel() and densities.min() < 0:
        raise ValueError("negative density")
    if deltas.numel() and deltas.min() <= 0:
        raise ValueError("nonpositive delta")
    dtype = densities.dtype
    optical = densities.double() * deltas.double()
    accum = torch.cumsum(optical, dim=-1)
    trans = torch.exp(-(accum - optical))  # exclusive: transmittance before each sample
    alpha = -torch.expm1(-optical)
    weights = alpha * trans
    residual = torch.exp(-accum[..., -1])
    feature = (weights[..., None] * features.double()).sum(dim=-2)
    return feature.to(dtype), weights.to(dtype), residual.to(dtype)


def importance_sample(
    coarse_weights: torch.Tensor,
    coarse_bins: torch.Tensor,
    n_fine: int,
    rng: np.random.Generator | None = None,
    uniforms: torch.Tensor | None = None,
) -> torch.Tensor:
    """Inverse-CDF draws from the piecewise-constant pdf over the bins.

    ``coarse_weights`` is (..., N) nonnegative, ``coarse_bins`` (..., N+1)
    increasing edges. Rows whose weights are all zero fall back to the
    uniform distribution. Output depths come back sorted. Differentiable in
    the weights for fixed uniforms.
    """
    if n_fine < 1:
        raise ValueError("n_fine must be >= 1")
    weights = torch.as_tensor(coarse_weights)
    bins = torch.as_tensor(coarse_bins, dtype=weights.dtype)
    if bins.shape[-1] != weights.shape[-1] + 1:
        raise ValueError("need N+1 bin edges for N weights")
    if weights.numel() and weights.min() < 0:
        raise ValueError("negative weights")
    total = weights.sum(dim=-1, keepdim=True)
    weights = torch.where(total > 0, weights, torch.ones_like(weights))
    total = weights.sum(dim=-1, keepdim=True)
    cdf = torch.cumsum(weights / total, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], dim=-1)

    if uniforms is None:
        if rng is None:
            raise ValueError("provide rng or uniforms")
        uniforms = torch.as_tensor(
            rng.random(weights.shape[:-1] + (n_fine,)), dtype=weights.dtype
        )
    u = torch.as_tensor(uniforms, dtype=weights.dtype)
    idx = torch.searchsorted(cdf.detach().contiguous(), u.contiguous(), right=True)
    idx = idx.clamp(1, weights.shape[-1])
    lo_c = torch.gather(cdf, -1, idx - 1)
    hi_c = torch.gather(cdf, -1, idx)
    denom = (hi_c - lo_c).clamp_min(torch.finfo(weights.dtype).tiny)
    frac = ((u - lo_c) / denom).clamp(0.0, 1.0)
    lo_b = torch.gather(bins, -1, idx - 1)
    hi_b = torch.gather(bins, -1, idx)
    samples = lo_b + frac * (hi_b - lo_b)
    return torch.sort(samples, dim=-1).values


def render(
    tri: RenderableTriplane,
    decoder: FeatureDecoder,
    pose: CameraPose,
    cfg: SamplingConfig,
    rng: np.random.Generator,
    upsampler: Upsampler2x | None = None,
    background: float = 0.0,
    box_pad: float = 0.1,
) -> RenderOutput:
    """Two-pass hierarchical render of a renderable triplane.

    Per ray: stratified coarse depths, decode + composite for importance
    weights, inverse-CDF fine depths, then a second decode + composite over
    the sorted union of coarse and fine depths. Depth is the compositing
    expectation guarded by 1e-8 at zero opacity; the residual transmittance
    mixes in the constant background feature; the final feature image goes
    through the 2x upsampler and the leading three channels through a
    sigmoid to give RGB.
    """
    dtype = tri.planes.dtype
    R = cfg.render_resolution
    rays = generate_rays(pose, R, box_pad=box_pad)
    n_rays = R * R

    # All stochastic draws happen here, in fixed order.
    if cfg.stratified:
        jitter = torch.as_tensor(rng.random((n_rays, cfg.n_coarse)), dtype=dtype)
    else:
        jitter = torch.full((n_rays, cfg.n_coarse), 0.5, dtype=dtype)
    u_fine = torch.as_tensor(rng.random((n_rays, cfg.n_fine)), dtype=dtype)

    valid = torch.as_tensor(rays.valid.reshape(-1))
    t_near = torch.as_tensor(rays.t_near.reshape(-1), dtype=dtype)
    t_far = torch.as_tensor(rays.t_far.reshape(-1), dtype=dtype)
    t_near = torch.where(valid, t_near, torch.zeros_like(t_near))
    t_far = torch.where(valid, t_far, torch.ones_like(t_far))
    origins = torch.as_tensor(rays.origins.reshape(-1, 3), dtype=dtype)
    dirs = torch.as_tensor(rays.directions.reshape(-1, 3), dtype=dtype)

    span = (t_far - t_near)[:, None]
    steps = torch.arange(cfg.n_coarse, dtype=dtype)[None, :]
    t_coarse = t_near[:, None] + (steps + jitter) / cfg.n_coarse * span

    def decode_at(depths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pts = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
        feats = batch_sample(tri, pts.reshape(-1, 3))
        sigma, feat = decoder(feats)
        return sigma.reshape(depths.shape), feat.reshape(*depths.shape, -1)

    def deltas_for(depths: torch.Tensor) -> torch.Tensor:
        d = torch.diff(depths, dim=-1)
        last = (t_far[:, None] - depths[..., -1:]).clamp_min(1e-12)
        return torch.cat([d.clamp_min(1e-12), last], dim=-1)

    sigma_c, feat_c = decode_at(t_coarse)
    _, w_coarse, _ = composite(sigma_c, feat_c, deltas_for(t_coarse))

    mids = 0.5 * (t_coarse[..., 1:] + t_coarse[..., :-1])
    bins = torch.cat([t_near[:, None], mids, t_far[:, None]], dim=-1)
    t_fine = importance_sample(w_coarse, bins, cfg.n_fine, uniforms=u_fine)

    # Decode only the fine depths; the decoder is deterministic, so merging
    # the coarse decode by sort order equals re-decoding the full union.
    sigma_f, feat_f = decode_at(t_fine)
    t_all, order = torch.sort(torch.cat([t_coarse, t_fine], dim=-1), dim=-1)
    sigma = torch.gather(torch.cat([sigma_c, sigma_f], dim=-1), -1, order)
    feat = torch.gather(
        torch.cat([feat_c, feat_f], dim=-2),
        -2,
        order[..., None].expand(-1, -1, feat_c.shape[-1]),
    )
    feature, weights, residual = composite(sigma, feat, deltas_for(t_all))

    bg = torch.full((decoder.feature_dim,), float(background), dtype=dtype)
    feature = feature + residual[:, None] * bg
    acc = weights.sum(dim=-1)
    opacity = acc.clamp(0.0, 1.0)
    depth = (weights * t_all).sum(dim=-1) / acc.clamp_min(1e-8)

    feature = torch.where(valid[:, None], feature, bg.expand_as(feature))
    opacity = torch.where(valid, opacity, torch.zeros_like(opacity))
    depth = torch.where(valid, depth, torch.zeros_like(depth))

    feature_raw = feature.reshape(R, R, -1)
    if upsampler is not None:
        feature_image = upsampler(feature_raw)
    else:
        feature_image = bilinear_upsample2x(feature_raw)
    rgb = torch.sigmoid(feature_image[..., :3])
    return RenderOutput(
        feature_raw=feature_raw,
        feature_image=feature_image,
        rgb=rgb,
        depth=depth.reshape(R, R),
        opacity=opacity.reshape(R, R),
        camera=pose,
    )
