"""Motion-aware cross-domain renderer.

A conv encoder lifts the source portrait to a token grid; a small
transformer canonicalizes those tokens under triplane guidance (pooled
plane patches join the self-attention and are discarded) and re-targets
expression through a non-spatial motion embedding injected by
cross-attention. The refined grid decodes to plane-space residuals that add
onto the rasterized triplane before volume rendering.

The training objective combines image reconstruction (L1 + perceptual),
feature/triplane/depth/opacity L1 terms, and a late-activated adversarial
term with weights 1, 1, 0.1, 1, 1, 0.01.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .dit import _attention
from .geometry import CameraPose
from .triplane import ParametricTriplane, RenderableTriplane
from .vae import GradientPerceptualMetric
from .volume import FeatureDecoder, RenderOutput, SamplingConfig, Upsampler2x, render

RE_WEIGHT = 1.0
F_WEIGHT = 1.0
TRI_WEIGHT = 0.1
DEPTH_WEIGHT = 1.0
OPA_WEIGHT = 1.0
ADV_WEIGHT = 0.01


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@dataclass
class MotionEmbedding:
    """Implicit motion code; carries no spatial axes by construction."""

    vector: torch.Tensor  # (D,) or (B, D)

    def __post_init__(self):
        if self.vector.ndim not in (1, 2):
            raise ValueError(
                f"motion embedding must be a vector or a batch of vectors, got shape "
                f"{tuple(self.vector.shape)}"
            )

    def batched(self) -> torch.Tensor:
        return self.vector[None] if self.vector.ndim == 1 else self.vector


@dataclass
class RendererLossReport:
    l_re: torch.Tensor
    l_f: torch.Tensor
    l_tri: torch.Tensor
    l_depth: torch.Tensor
    l_opa: torch.Tensor
    l_adv: torch.Tensor

    @property
    def total(self):
        return (
            RE_WEIGHT * self.l_re
            + F_WEIGHT * self.l_f
            + TRI_WEIGHT * self.l_tri
            + DEPTH_WEIGHT * self.l_depth
            + OPA_WEIGHT * self.l_opa
            + ADV_WEIGHT * self.l_adv
        )

    def to_scalars(self) -> dict:
        return {
            "l_re": _scalar(self.l_re),
            "l_f": _scalar(self.l_f),
            "l_tri": _scalar(self.l_tri),
            "l_depth": _scalar(self.l_depth),
            "l_opa": _scalar(self.l_opa),
            "l_adv": _scalar(self.l_adv),
            "total": _scalar(self.total),
        }


class MotionEncoder(nn.Module):
    """Expression parameters -> motion embedding (desk default source).

    An image-based motion encoder can replace this behind the same
    interface; synthetic data makes the true expression available.
    """

    def __init__(self, expression_dim: int = 8, motion_dim: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(expression_dim, 64), nn.SiLU(), nn.Linear(64, motion_dim)
        )

    def forward(self, expression: torch.Tensor) -> MotionEmbedding:
        return MotionEmbedding(vector=self.net(expression))


class SourceEncoder(nn.Module):
    """Portrait image -> token grid at one-eighth resolution."""

    def __init__(self, width: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GroupNorm(8, 64),
            nn.SiLU(),
            nn.Conv2d(64, width, 3, stride=2, padding=1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, R, R) or (3, R, R) -> (B, g, g, width), g = R / 8."""
        squeeze = image.ndim == 3
        if squeeze:
            image = image[None]
        grid = self.net(image).permute(0, 2, 3, 1)
        return grid[0] if squeeze else grid


class MotionVitBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.attn_out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.cross_q = nn.Linear(width, width)
        self.cross_kv = nn.Linear(width, 2 * width)
        self.cross_out = nn.Linear(width, width)
        self.ln3 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(
        self, tokens: torch.Tensor, guide_tokens: torch.Tensor, motion_kv: torch.Tensor
    ) -> torch.Tensor:
        h = self.ln1(tokens)
        seq = torch.cat([guide_tokens, h], dim=1)
        qkv_seq = self.qkv(seq)
        width = tokens.shape[-1]
        q = qkv_seq[:, guide_tokens.shape[1] :, :width]
        k, v = qkv_seq[..., width : 2 * width], qkv_seq[..., 2 * width :]
        tokens = tokens + self.attn_out(_attention(q, k, v, self.heads))

        c = self.ln2(tokens)
        kv = self.cross_kv(motion_kv)
        ck, cv = kv.chunk(2, dim=-1)
        tokens = tokens + self.cross_out(_attention(self.cross_q(c), ck, cv, self.heads))

        tokens = tokens + self.mlp(self.ln3(tokens))
        return tokens


class PlaneDecoder(nn.Module):
    """Token grid -> additive residuals for the three rasterized planes.

    The final conv is zero-initialized, so an untrained renderer reproduces
    the plain rasterize-and-render path exactly.
    """

    def __init__(self, width: int, plane_channels: int, grid: int, plane_resolution: int):
        super().__init__()
        if plane_resolution % grid:
            raise ValueError("plane resolution must be a multiple of the token grid")
        ups = 0
        side = grid
        while side < plane_resolution:
            side *= 2
            ups += 1
        if side != plane_resolution:
            raise ValueError("plane resolution must be grid * 2^k")
        self.plane_channels = plane_channels
        layers: list[nn.Module] = []
        ch = width
        for _ in range(ups):
            nxt = max(32, ch // 2)
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, nxt, 3, padding=1),
                nn.GroupNorm(8, nxt),
                nn.SiLU(),
            ]
            ch = nxt
        head = nn.Conv2d(ch, 3 * plane_channels, 3, padding=1)
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)
        layers.append(head)
        self.net = nn.Sequential(*layers)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """(B, g, g, width) or (g, g, width) -> (B, 3, H, W, C)."""
        squeeze = grid.ndim == 3
        if squeeze:
            grid = grid[None]
        x = self.net(grid.permute(0, 3, 1, 2))
        B, _, H, W = x.shape
        planes = x.reshape(B, 3, self.plane_channels, H, W).permute(0, 1, 3, 4, 2)
        return planes[0] if squeeze else planes


class PatchDiscriminator(nn.Module):
    """Three-layer patch critic for the late adversarial phase."""

    def __init__(self, channels: int = 3):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, 32, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(64, 1, 4, padding=1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim == 3:
            image = image[None]
        return self.net(image.permute(0, 3, 1, 2) if image.shape[-1] in (1, 3) else image)


class MotionRenderer(nn.Module):
    def __init__(
        self,
        width: int = 128,
        blocks: int = 2,
        heads: int = 4,
        motion_dim: int = 32,
        expression_dim: int = 8,
        plane_channels: int = 16,
        plane_resolution: int = 64,
        image_resolution: int = 128,
        tri_pool: int = 4,
    ):
        super().__init__()
        self.width = width
        self.image_resolution = image_resolution
        self.tri_pool = tri_pool
        self.source_encoder = SourceEncoder(width)
        self.motion_encoder = MotionEncoder(expression_dim, motion_dim)
        self.motion_proj = nn.Linear(motion_dim, width)
        self.tri_proj = nn.Linear(plane_channels, width)
        self.vit_blocks = nn.ModuleList(MotionVitBlock(width, heads) for _ in range(blocks))
        self.plane_decoder = PlaneDecoder(
            width, plane_channels, image_resolution // 8, plane_resolution
        )

    def encode_source(self, image: torch.Tensor) -> torch.Tensor:
        """(3, R, R) or (B, 3, R, R) image at the configured resolution."""
        if image.shape[-1] != self.image_resolution or image.shape[-2] != self.image_resolution:
            raise ValueError(
                f"source image must be {self.image_resolution}^2, got {tuple(image.shape[-2:])}"
            )
        return self.source_encoder(image)

    def triplane_tokens(self, tri: ParametricTriplane) -> torch.Tensor:
        """Average-pooled plane patches, linearly lifted to the token width."""
        planes = tri.planes if isinstance(tri, ParametricTriplane) else tri
        x = planes.permute(0, 3, 1, 2)  # (P, C, H, W)
        pooled = F.adaptive_avg_pool2d(x, self.tri_pool)
        tokens = pooled.permute(0, 2, 3, 1).reshape(-1, planes.shape[-1])
        return self.tri_proj(tokens)[None]

    def motion_vit(
        self,
        source_features: torch.Tensor,
        tri: ParametricTriplane | torch.Tensor,
        motion: MotionEmbedding,
    ) -> torch.Tensor:
        """Canonicalize source tokens under triplane guidance; re-target via
        the motion embedding. Output grid matches the input grid shape."""
        squeeze = source_features.ndim == 3
        grid = source_features[None] if squeeze else source_features
        B, g1, g2, width = grid.shape
        tokens = grid.reshape(B, g1 * g2, width)
        guide = self.triplane_tokens(tri).expand(B, -1, -1)
        motion_kv = self.motion_proj(motion.batched())[:, None, :].expand(B, -1, -1)
        for block in self.vit_blocks:
            tokens = block(tokens, guide, motion_kv)
        out = tokens.reshape(B, g1, g2, width)
        return out[0] if squeeze else out

    def fuse_and_render(
        self,
        refined: torch.Tensor,
        fused_tri: RenderableTriplane,
        pose: CameraPose,
        decoder: FeatureDecoder,
        cfg: SamplingConfig,
        rng: np.random.Generator,
        upsampler: Upsampler2x | None = None,
        background: float = 0.0,
        box_pad: float = 0.1,
    ) -> tuple[RenderOutput, torch.Tensor]:
        """Decode the refined grid to plane residuals, add them onto the
        rasterized planes, and volume-render. Returns the render output and
        the refined plane stack (for the triplane loss term)."""
        residual = self.plane_decoder(refined)
        planes = fused_tri.planes + residual.to(fused_tri.planes.dtype)
        refined_tri = RenderableTriplane(planes=planes, provenance=dict(fused_tri.provenance))
        out = render(
            refined_tri,
            decoder,
            pose,
            cfg,
            rng,
            upsampler=upsampler,
            background=background,
            box_pad=box_pad,
        )
        return out, planes


def renderer_loss(
    outputs: dict,
    targets: dict,
    step: int,
    adv_start_step: int = 10**9,
    perceptual=None,
    adv_logits: torch.Tensor | None = None,
) -> RendererLossReport:
    """Weighted training objective.

    ``outputs`` and ``targets`` carry ``image`` (H, W, 3), ``feature``
    (H, W, F), ``triplane`` (3, H, W, C), ``depth`` and ``opacity`` (H, W).
    The adversarial term is zero before ``adv_start_step`` regardless of the
    critic output; afterwards it is the non-saturating generator loss on
    ``adv_logits``.
    """
    for key in ("image", "feature", "triplane", "depth", "opacity"):
        if key not in outputs or key not in targets:
            raise ValueError(f"missing loss target {key!r}")
    perceptual = perceptual or GradientPerceptualMetric()
    l_re = (outputs["image"] - targets["image"]).abs().mean() + perceptual(
        outputs["image"], targets["image"]
    )
    l_f = (outputs["feature"] - targets["feature"]).abs().mean()
    l_tri = (outputs["triplane"] - targets["triplane"]).abs().mean()
    l_depth = (outputs["depth"] - targets["depth"]).abs().mean()
    l_opa = (outputs["opacity"] - targets["opacity"]).abs().mean()
    if step < adv_start_step or adv_logits is None:
        l_adv = torch.zeros((), dtype=l_re.dtype)
    else:
        l_adv = F.softplus(-adv_logits).mean()
    return RendererLossReport(
        l_re=l_re, l_f=l_f, l_tri=l_tri, l_depth=l_depth, l_opa=l_opa, l_adv=l_adv
    )
