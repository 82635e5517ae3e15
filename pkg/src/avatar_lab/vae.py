"""Triplane VAE: 3D-convolutional compression of the plane stack.

The plane-group axis is treated as a depth dimension, so a ``P x H x W x C``
stack becomes a ``C x P x H x W`` volume; two stride-(1, 2, 2) levels give
the 4x spatial compression (256^2 x 4 x 32 -> 64^2 x 4 x 8 at reference
scale, 64^2 x 4 x 16 -> 16^2 x 4 x 4 at desk scale). The final encoder
projection is zero-initialized so training starts at the prior.

The loss couples plane-space reconstruction with render consistency: L1 on
the planes, L1 on a rendered depth map, a perceptual distance on the
rendered image, and the Gaussian KL at weight 1e-5. The perceptual slot is
an interface; the default metric is a pretrained-free multi-scale
gradient-magnitude L1 so a learned perceptual metric can be dropped in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .triplane import ParametricTriplane, default_static_mask

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@dataclass
class TriplaneLatent:
    mean: torch.Tensor  # (p, h, w, c)
    logvar: torch.Tensor
    sample: torch.Tensor
    eps: torch.Tensor | None = None


@dataclass
class VaeLossReport:
    l1_triplane: torch.Tensor
    l1_depth: torch.Tensor
    perceptual_image: torch.Tensor
    kl: torch.Tensor
    kl_weight: float = 1e-5

    @property
    def total(self):
        return (
            1.0 * self.l1_triplane
            + 1.0 * self.l1_depth
            + 1.0 * self.perceptual_image
            + self.kl_weight * self.kl
        )

    def to_scalars(self) -> dict:
        return {
            "l1_triplane": _scalar(self.l1_triplane),
            "l1_depth": _scalar(self.l1_depth),
            "perceptual_image": _scalar(self.perceptual_image),
            "kl": _scalar(self.kl),
            "total": _scalar(self.total),
        }


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class TriplaneVae(nn.Module):
    def __init__(
        self,
        channels: int = 16,
        latent_channels: int = 4,
        base_channels: int = 32,
        downsample: int = 4,
    ):
        super().__init__()
        levels = int(round(math.log2(downsample)))
        if 2**levels != downsample or levels < 1:
            raise ValueError("downsample must be a power of two >= 2")
        self.channels = channels
        self.latent_channels = latent_channels
        self.downsample = downsample

        enc = []
        ch = channels
        width = base_channels
        for _ in range(levels):
            enc += [nn.Conv3d(ch, width, 3, stride=(1, 2, 2), padding=1), _norm(width), nn.SiLU()]
            ch, width = width, width * 2
        enc += [nn.Conv3d(ch, ch, 3, padding=1), _norm(ch), nn.SiLU()]
        head = nn.Conv3d(ch, 2 * latent_channels, 3, padding=1)
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)
        enc.append(head)
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv3d(latent_channels, ch, 3, padding=1), _norm(ch), nn.SiLU()]
        for _ in range(levels):
            nxt = max(base_channels, ch // 2)
            dec += [
                nn.Upsample(scale_factor=(1, 2, 2), mode="nearest"),
                nn.Conv3d(ch, nxt, 3, padding=1),
                _norm(nxt),
                nn.SiLU(),
            ]
            ch = nxt
        dec.append(nn.Conv3d(ch, channels, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

    def encode_tensors(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, C, P, H, W) -> mean, logvar each (B, c, P, h, w)."""
        out = self.encoder(x)
        mean, logvar = out.chunk(2, dim=1)
        return mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    def decode_tensors(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)


def planes_to_tensor(planes: torch.Tensor) -> torch.Tensor:
    """(P, H, W, C) -> (C, P, H, W) volume for the 3D convs."""
    return planes.permute(3, 0, 1, 2).contiguous()


def tensor_to_planes(x: torch.Tensor) -> torch.Tensor:
    return x.permute(1, 2, 3, 0).contiguous()


def _moments_to_latent_layout(x: torch.Tensor) -> torch.Tensor:
    """(c, P, h, w) -> (P, h, w, c)."""
    return x.permute(1, 2, 3, 0).contiguous()


def encode(
    vae: TriplaneVae,
    tri: ParametricTriplane,
    rng: np.random.Generator | None = None,
    eps: torch.Tensor | None = None,
    deterministic: bool = False,
) -> TriplaneLatent:
    """Encode one triplane; the reparameterization noise is recorded."""
    if tri.channels != vae.channels:
        raise ValueError(f"triplane channels {tri.channels} != vae channels {vae.channels}")
    x = planes_to_tensor(tri.planes)[None]
    mean_t, logvar_t = vae.encode_tensors(x)
    mean = _moments_to_latent_layout(mean_t[0])
    logvar = _moments_to_latent_layout(logvar_t[0])
    if deterministic:
        eps = torch.zeros_like(mean)
    elif eps is None:
        if rng is None:
            raise ValueError("provide rng, eps, or deterministic=True")
        eps = torch.as_tensor(rng.standard_normal(tuple(mean.shape)), dtype=mean.dtype)
    sample = mean + torch.exp(0.5 * logvar) * eps
    return TriplaneLatent(mean=mean, logvar=logvar, sample=sample, eps=eps)


def decode(vae: TriplaneVae, lat: TriplaneLatent | torch.Tensor, meta: dict | None = None) -> ParametricTriplane:
    z = lat.sample if isinstance(lat, TriplaneLatent) else lat
    z_t = z.permute(3, 0, 1, 2)[None]
    planes = tensor_to_planes(vae.decode_tensors(z_t)[0])
    return ParametricTriplane(
        planes=planes,
        static_mask=default_static_mask(planes.shape[0]),
        meta=dict(meta or {}),
    )


def kl_divergence(lat: TriplaneLatent | tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
    """0.5 * sum(mu^2 + e^logvar - logvar - 1), summed over elements.

    Batched inputs (leading batch axis on both moments) are mean-reduced
    over the batch after the per-sample element sum.
    """
    if isinstance(lat, TriplaneLatent):
        mean, logvar = lat.mean, lat.logvar
    else:
        mean, logvar = lat
    per_element = 0.5 * (mean**2 + torch.exp(logvar) - logvar - 1.0)
    return per_element.sum()


def kl_divergence_batched(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample element sum, mean over the leading batch axis."""
    per_element = 0.5 * (mean**2 + torch.exp(logvar) - logvar - 1.0)
    return per_element.reshape(per_element.shape[0], -1).sum(dim=1).mean()


class GradientPerceptualMetric:
    """Pretrained-free perceptual proxy: L1 between multi-scale gradient
    magnitudes. Stands in for a learned perceptual metric behind the same
    callable interface (image_a, image_b) -> scalar."""

    def __init__(self, scales: tuple[int, ...] = (1, 2, 4)):
        self.scales = scales

    @staticmethod
    def _gradient_magnitude(img: torch.Tensor) -> torch.Tensor:
        dx = img[:, :, 1:, :] - img[:, :, :-1, :]
        dy = img[:, :, :, 1:] - img[:, :, :, :-1]
        gx = F.pad(dx, (0, 0, 0, 1)) ** 2
        gy = F.pad(dy, (0, 1, 0, 0)) ** 2
        return torch.sqrt(gx + gy + 1e-12)

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Images are (H, W, C) or (B, H, W, C) in any consistent range."""
        if a.shape != b.shape:
            raise ValueError("perceptual inputs must share a shape")
        if a.ndim == 3:
            a, b = a[None], b[None]
        a = a.permute(0, 3, 1, 2)
        b = b.permute(0, 3, 1, 2)
        losses = []
        for s in self.scales:
            aa = F.avg_pool2d(a, s) if s > 1 else a
            bb = F.avg_pool2d(b, s) if s > 1 else b
            losses.append((self._gradient_magnitude(aa) - self._gradient_magnitude(bb)).abs().mean())
        return torch.stack(losses).mean()


def vae_loss(
    tri_planes: torch.Tensor,
    recon_planes: torch.Tensor,
    rendered_pairs: dict,
    lat_moments: tuple[torch.Tensor, torch.Tensor],
    perceptual=None,
    kl_weight: float = 1e-5,
    batched_kl: bool = False,
) -> VaeLossReport:
    """Composite loss; ``rendered_pairs`` must carry image and depth pairs
    rendered with the frozen oracle decoder at a sampled pose."""
    for key in ("image", "depth"):
        if key not in rendered_pairs:
            raise ValueError(f"missing render pair {key!r}")
    perceptual = perceptual or GradientPerceptualMetric()
    img_gt, img_re = rendered_pairs["image"]
    dep_gt, dep_re = rendered_pairs["depth"]
    mean, logvar = lat_moments
    kl = kl_divergence_batched(mean, logvar) if batched_kl else kl_divergence((mean, logvar))
    return VaeLossReport(
        l1_triplane=(tri_planes - recon_planes).abs().mean(),
        l1_depth=(dep_gt - dep_re).abs().mean(),
        perceptual_image=perceptual(img_gt, img_re),
        kl=kl,
        kl_weight=kl_weight,
    )
