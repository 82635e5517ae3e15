"""Evaluation metrics and desk-scale probe regressors.

FID/identity/keypoint metrics need pretrained networks and stay out of
scope; the proxies here are self-contained: PSNR and SSIM for image
fidelity, plus two small conv regressors ("probes") trained on synthetic
ground truth that recover camera angles and expression vectors from rendered
frames. Pose consistency is the mean angle between the requested and
probe-estimated view directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .rng import derive_seed, make_torch_gen


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    pose_consistency: float
    expression_error: float

    def __post_init__(self):
        for name in ("psnr", "ssim", "pose_consistency", "expression_error"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"metric {name} is not finite")

    def to_dict(self) -> dict:
        return {
            "psnr": self.psnr,
            "ssim": self.ssim,
            "pose_consistency": self.pose_consistency,
            "expression_error": self.expression_error,
        }


def psnr(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] @ g[None, :])[None, None]


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    """Mean structural similarity with the standard 11x11 Gaussian window."""
    if a.shape != b.shape:
        raise ValueError("ssim inputs must share a shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    x = a.double().permute(2, 0, 1)[:, None]
    y = b.double().permute(2, 0, 1)[:, None]
    win = _gaussian_window().to(x.dtype)
    pad = win.shape[-1] // 2
    mu_x = F.conv2d(x, win, padding=pad)
    mu_y = F.conv2d(y, win, padding=pad)
    xx = F.conv2d(x * x, win, padding=pad) - mu_x**2
    yy = F.conv2d(y * y, win, padding=pad) - mu_y**2
    xy = F.conv2d(x * y, win, padding=pad) - mu_x * mu_y
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    score = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (xx + yy + c2))
    return float(score.mean())


class ImageProbe(nn.Module):
    """Small conv regressor mapping an image to a target vector."""

    def __init__(self, out_dim: int, width: int = 64):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(64, width, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(width, out_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) in [0, 1] -> (B, out_dim)."""
        x = images.permute(0, 3, 1, 2)
        feat = self.features(x)
        return self.head(feat.mean(dim=(2, 3)))


def train_probe(
    images: torch.Tensor,
    targets: torch.Tensor,
    seed: int,
    steps: int = 600,
    batch_size: int = 16,
    lr: float = 1e-3,
) -> ImageProbe:
    """Deterministic probe fit (Adam, MSE)."""
    gen = make_torch_gen(seed, "probe")
    torch.manual_seed(derive_seed(seed, "probe-init"))
    probe = ImageProbe(out_dim=targets.shape[1])
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    n = images.shape[0]
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        pred = probe(images[idx])
        loss = ((pred - targets[idx]) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    probe.eval()
    return probe


def view_direction(pitch: float, yaw: float) -> np.ndarray:
    return np.array(
        [
            math.cos(pitch) * math.sin(yaw),
            math.sin(pitch),
            math.cos(pitch) * math.cos(yaw),
        ]
    )


def pose_angular_error(requested: tuple[float, float], estimated: tuple[float, float]) -> float:
    """Angle in radians between the two camera view directions."""
    a = view_direction(*requested)
    b = view_direction(*estimated)
    return float(math.acos(np.clip(a @ b, -1.0, 1.0)))
