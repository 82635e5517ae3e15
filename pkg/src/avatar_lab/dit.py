"""Image-conditioned latent diffusion transformer.

The latent `(p, h, w, c)` is reshaped plane-major into a `(p*h, w, c)` image,
patchified, linearly embedded, and given learned positional embeddings.
Each block runs (i) modulated self-attention over the image patch tokens
concatenated with the latent tokens, keeping only the latent positions,
(ii) cross-attention from latent tokens to the global semantic embeddings,
(iii) a modulated feed-forward. Time modulation is adaLN-single: one shared
projection of the time embedding produces the global
`[gamma1, beta1, alpha1, gamma2, beta2, alpha2]`, and each block adds its own
trainable offset — the only per-block modulation parameters.

The final head emits two channels per latent element: predicted noise and
the variance interpolation coefficient, squashed to [0, 1] by a sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import ModelPrediction


@dataclass(frozen=True)
class TokenLayout:
    planes: int
    height: int
    width: int
    channels: int
    patch: int = 2

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("patch must divide the latent height and width")

    @property
    def tokens(self) -> int:
        return self.planes * (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def grid(self) -> tuple[int, int]:
        return (self.planes * self.height // self.patch, self.width // self.patch)

    def patchify(self, z: torch.Tensor) -> torch.Tensor:
        """(B, p, h, w, c) -> (B, tokens, patch^2 * c); plane axis fuses into rows."""
        squeeze = z.ndim == 4
        if squeeze:
            z = z[None]
        B, p, h, w, c = z.shape
        if (p, h, w, c) != (self.planes, self.height, self.width, self.channels):
            raise ValueError(f"latent shape {(p, h, w, c)} does not match the layout")
        rows = z.reshape(B, p * h, w, c)
        gr, gc = self.grid
        x = rows.reshape(B, gr, self.patch, gc, self.patch, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, gr * gc, self.patch_dim)
        return x[0] if squeeze else x

    def unpatchify(self, x: torch.Tensor, channels: int | None = None) -> torch.Tensor:
        """(B, tokens, patch^2 * C') -> (B, p, h, w, C')."""
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        B = x.shape[0]
        gr, gc = self.grid
        c = (channels or self.channels)
        z = x.reshape(B, gr, gc, self.patch, self.patch, c)
        z = z.permute(0, 1, 3, 2, 4, 5).reshape(B, self.planes, self.height, self.width, c)
        return z[0] if squeeze else z


@dataclass
class ConditionBundle:
    semantic: torch.Tensor  # (B, S, width) global image semantics
    patch_tokens: torch.Tensor  # (B, M, width) fine-grained image tokens
    null_flag: bool = False


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.dtype)
    args = t[:, None].to(freqs.dtype) * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class AdaLnSingle(nn.Module):
    """One shared time-to-modulation projection plus per-block offsets."""

    def __init__(self, width: int, n_blocks: int, time_dim: int = 256):
        super().__init__()
        self.width = width
        self.time_dim = time_dim
        self.time_proj = nn.Sequential(
            nn.Linear(time_dim, width),
            nn.SiLU(),
            nn.Linear(width, 6 * width),
        )
        nn.init.zeros_(self.time_proj[-1].weight)
        nn.init.zeros_(self.time_proj[-1].bias)
        self.block_tables = nn.Parameter(torch.zeros(n_blocks, 6 * width))

    def base(self, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t.to(torch.float32), self.time_dim)
        return self.time_proj(emb)

    def block_params(self, base: torch.Tensor, block_idx: int):
        """Six (B, 1, width) modulation tensors for one block."""
        p = base + self.block_tables[block_idx][None]
        return tuple(chunk[:, None, :] for chunk in p.chunk(6, dim=-1))


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    B, N, D = q.shape
    M = k.shape[1]
    hd = D // heads
    q = q.reshape(B, N, heads, hd).transpose(1, 2)
    k = k.reshape(B, M, heads, hd).transpose(1, 2)
    v = v.reshape(B, M, heads, hd).transpose(1, 2)
    att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
    out = (att @ v).transpose(1, 2).reshape(B, N, D)
    return out


class DitBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.ln1 = nn.LayerNorm(width, elementwise_affine=False)
        self.qkv = nn.Linear(width, 3 * width)
        self.attn_out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width, elementwise_affine=False)
        self.cross_q = nn.Linear(width, width)
        self.cross_kv = nn.Linear(width, 2 * width)
        self.cross_out = nn.Linear(width, width)
        nn.init.zeros_(self.cross_out.weight)
        nn.init.zeros_(self.cross_out.bias)
        self.ln3 = nn.LayerNorm(width, elementwise_affine=False)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, tokens: torch.Tensor, cond: ConditionBundle, mods) -> torch.Tensor:
        g1, b1, a1, g2, b2, a2 = mods
        h = self.ln1(tokens) * (1 + g1) + b1
        # Joint self-attention over [image patch tokens || latent tokens];
        # queries come from the latent positions only, which is exactly the
        # concatenate-then-discard formulation restricted to the kept rows.
        seq = torch.cat([cond.patch_tokens, h], dim=1)
        qkv_seq = self.qkv(seq)
        width = tokens.shape[-1]
        q = qkv_seq[:, cond.patch_tokens.shape[1] :, :width]
        k, v = qkv_seq[..., width : 2 * width], qkv_seq[..., 2 * width :]
        tokens = tokens + a1 * self.attn_out(_attention(q, k, v, self.heads))

        c = self.ln2(tokens)
        kv = self.cross_kv(cond.semantic)
        ck, cv = kv.chunk(2, dim=-1)
        tokens = tokens + self.cross_out(_attention(self.cross_q(c), ck, cv, self.heads))

        f = self.ln3(tokens) * (1 + g2) + b2
        tokens = tokens + a2 * self.mlp(f)
        return tokens


class ConditionEncoder(nn.Module):
    """Pluggable desk-scale image encoders plus the learned null bundle.

    ``semantic``: conv pyramid globally pooled to a short token sequence.
    ``patch``: a single-shot conv patchifier producing grid tokens that
    arrive pre-embedded (no extra positional embedding of their own).
    """

    def __init__(
        self,
        width: int = 128,
        resolution: int = 64,
        semantic_tokens: int = 4,
        patch_grid: int = 8,
    ):
        super().__init__()
        side = int(round(math.sqrt(semantic_tokens)))
        if side * side != semantic_tokens:
            raise ValueError("semantic_tokens must be a perfect square")
        if resolution % patch_grid:
            raise ValueError("patch_grid must divide the condition resolution")
        self.width = width
        self.resolution = resolution
        self.semantic_side = side
        self.patch_grid = patch_grid
        self.semantic_net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GroupNorm(8, 64),
            nn.SiLU(),
            nn.Conv2d(64, width, 3, stride=2, padding=1),
        )
        self.patch_net = nn.Conv2d(3, width, resolution // patch_grid, stride=resolution // patch_grid)
        self.null_semantic = nn.Parameter(torch.randn(semantic_tokens, width) * 0.02)
        self.null_patch = nn.Parameter(torch.randn(patch_grid * patch_grid, width) * 0.02)

    def encode(self, images: torch.Tensor) -> ConditionBundle:
        """(B, 3, R, R) or (3, R, R) at the configured resolution."""
        squeeze = images.ndim == 3
        if squeeze:
            images = images[None]
        if images.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(
                f"condition images must be {self.resolution}^2, got {tuple(images.shape[-2:])}"
            )
        sem = self.semantic_net(images)
        sem = F.adaptive_avg_pool2d(sem, self.semantic_side)
        sem = sem.flatten(2).transpose(1, 2)
        patch = self.patch_net(images).flatten(2).transpose(1, 2)
        return ConditionBundle(semantic=sem, patch_tokens=patch, null_flag=False)

    def null_bundle(self, batch: int = 1) -> ConditionBundle:
        return ConditionBundle(
            semantic=self.null_semantic[None].expand(batch, -1, -1),
            patch_tokens=self.null_patch[None].expand(batch, -1, -1),
            null_flag=True,
        )

    def mix_with_null(self, bundle: ConditionBundle, drop: torch.Tensor) -> ConditionBundle:
        """Replace rows flagged by the boolean ``drop`` mask with the null bundle."""
        d = drop[:, None, None]
        return ConditionBundle(
            semantic=torch.where(d, self.null_semantic[None].to(bundle.semantic.dtype), bundle.semantic),
            patch_tokens=torch.where(d, self.null_patch[None].to(bundle.patch_tokens.dtype), bundle.patch_tokens),
            null_flag=False,
        )


def sample_condition_drop(rng: np.random.Generator, batch: int, drop_prob: float) -> torch.Tensor:
    """Per-sample Bernoulli mask for classifier-free condition dropping."""
    return torch.as_tensor(rng.random(batch) < drop_prob)


class LatentDit(nn.Module):
    def __init__(
        self,
        layout: TokenLayout,
        width: int = 128,
        blocks: int = 4,
        heads: int = 4,
    ):
        super().__init__()
        self.layout = layout
        self.width = width
        self.embed = nn.Linear(layout.patch_dim, width)
        self.pos_embed = nn.Parameter(torch.randn(layout.tokens, width) * 0.02)
        self.adaln = AdaLnSingle(width, blocks)
        self.blocks = nn.ModuleList(DitBlock(width, heads) for _ in range(blocks))
        self.final_norm = nn.LayerNorm(width, elementwise_affine=False)
        self.head = nn.Linear(width, layout.patch * layout.patch * 2 * layout.channels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def tokenize(self, z_t: torch.Tensor) -> torch.Tensor:
        return self.embed(self.layout.patchify(z_t)) + self.pos_embed

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: ConditionBundle) -> ModelPrediction:
        squeeze = z_t.ndim == 4
        if squeeze:
            z_t = z_t[None]
        t = torch.as_tensor(t).reshape(-1)
        if t.shape[0] != z_t.shape[0]:
            t = t.expand(z_t.shape[0])
        tokens = self.tokenize(z_t)
        base = self.adaln.base(t)
        for i, block in enumerate(self.blocks):
            tokens = block(tokens, cond, self.adaln.block_params(base, i))
        out = self.head(self.final_norm(tokens))
        both = self.layout.unpatchify(out, channels=2 * self.layout.channels)
        eps, v_raw = both.split(self.layout.channels, dim=-1)
        v = torch.sigmoid(v_raw)
        if squeeze:
            eps, v = eps[0], v[0]
        return ModelPrediction(eps=eps, v=v)
