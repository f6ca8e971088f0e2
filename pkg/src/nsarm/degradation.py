"""LR synthesis (blur -> area downsample -> noise) and a procedural toy image set."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .numerics import Rng, resize_down


@dataclass(frozen=True)
class DegradationCfg:
    blur_sigma_range: tuple[float, float] = (0.0, 0.0)
    noise_std_range: tuple[float, float] = (0.0, 0.0)
    scale_factor: int = 4
    second_order: bool = False

    def __post_init__(self):
        for lo, hi in (self.blur_sigma_range, self.noise_std_range):
            if lo < 0 or hi < lo:
                raise ValueError("ranges must be non-negative with min <= max")
        if self.noise_std_range[1] > 1:
            raise ValueError("noise std is in [0, 1] pixel units")
        if self.scale_factor < 1:
            raise ValueError("scale_factor must be >= 1")


PRESETS = {
    "none": DegradationCfg(),
    "mild": DegradationCfg((0.2, 1.0), (0.0, 0.02)),
    "medium": DegradationCfg((0.5, 2.0), (0.01, 0.05), second_order=True),
    "severe": DegradationCfg((1.0, 3.0), (0.03, 0.1), second_order=True),
}


def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of a ``(H, W, C)`` image with reflect padding."""
    if sigma <= 0:
        return image
    radius = max(1, math.ceil(3 * sigma))
    radius = min(radius, image.shape[0] - 1, image.shape[1] - 1)
    t = torch.arange(-radius, radius + 1, dtype=image.dtype)
    k = torch.exp(-(t**2) / (2 * sigma**2))
    k = k / k.sum()
    x = image.permute(2, 0, 1).unsqueeze(1)  # C,1,H,W
    x = F.pad(x, (radius, radius, radius, radius), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, -1, 1))
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    return x.squeeze(1).permute(1, 2, 0)


def _noise(image: torch.Tensor, std: float, rng: Rng) -> torch.Tensor:
    if std <= 0:
        return image
    return image + std * rng.randn(*image.shape, dtype=image.dtype)


def degrade(gt: torch.Tensor, cfg: DegradationCfg, rng: Rng) -> torch.Tensor:
    """Degrade a ``(H, W, 3)`` image in [0, 1] to ``(H/s, W/s, 3)``.

    Parameters are drawn from ``rng`` in a fixed order. The second-order pass
    repeats blur and noise at half strength on the LR image.
    """
    H, W = gt.shape[:2]
    s = cfg.scale_factor
    if H % s or W % s:
        raise ValueError(f"image {H}x{W} not divisible by scale factor {s}")
    sigma = rng.uniform(*cfg.blur_sigma_range)
    std = rng.uniform(*cfg.noise_std_range)
    x = gaussian_blur(gt, sigma)
    x = resize_down(x, (H // s, W // s))
    x = _noise(x, std, rng)
    if cfg.second_order:
        sigma2 = 0.5 * rng.uniform(*cfg.blur_sigma_range) / s
        std2 = 0.5 * rng.uniform(*cfg.noise_std_range)
        x = gaussian_blur(x.clamp(0, 1), sigma2)
        x = _noise(x, std2, rng)
    return x.clamp(0.0, 1.0)


def degrade_batch(images: torch.Tensor, cfg: DegradationCfg, rng: Rng) -> torch.Tensor:
    return torch.stack([degrade(img, cfg, rng.child(f"img{i}")) for i, img in enumerate(images)])


def _smoothstep(sd: np.ndarray) -> np.ndarray:
    # signed distance in pixels -> coverage with a one-pixel anti-aliased edge
    return np.clip(0.5 - sd, 0.0, 1.0)


def _toy_image(side: int, g: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(side) + 0.5, np.arange(side) + 0.5, indexing="ij")
    c0, c1 = g.uniform(0, 1, 3), g.uniform(0, 1, 3)
    ang = g.uniform(0, 2 * np.pi)
    t = ((xx - side / 2) * np.cos(ang) + (yy - side / 2) * np.sin(ang)) / side + 0.5
    img = c0 + np.clip(t, 0, 1)[..., None] * (c1 - c0)

    for _ in range(g.integers(2, 6)):
        kind = g.integers(0, 3)
        color = g.uniform(0, 1, 3)
        cx, cy = g.uniform(0, side, 2)
        if kind == 0:  # ellipse
            a, b = g.uniform(side / 10, side / 3, 2)
            r = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
            sd = (r - 1) * min(a, b)
            alpha = _smoothstep(sd)
        elif kind == 1:  # rotated rectangle
            a, b = g.uniform(side / 10, side / 3, 2)
            th = g.uniform(0, np.pi)
            u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
            v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
            sd = np.maximum(np.abs(u) - a, np.abs(v) - b)
            alpha = _smoothstep(sd)
        else:  # stripe texture inside a disc
            rad = g.uniform(side / 6, side / 2.5)
            period = g.uniform(8, 16)
            th = g.uniform(0, np.pi)
            phase = (xx * np.cos(th) + yy * np.sin(th)) * 2 * np.pi / period
            stripes = 0.5 + 0.5 * np.sin(phase)
            sd = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) - rad
            alpha = _smoothstep(sd) * stripes
        img = img * (1 - alpha[..., None]) + color * alpha[..., None]
    return np.clip(img, 0.0, 1.0)


def make_toy_dataset(n: int, side: int, rng: Rng, allow_empty: bool = False) -> torch.Tensor:
    """``n`` procedural ``side x side`` RGB images in [0, 1], shape ``(n, side, side, 3)``.

    Each image has its own derived seed, so image ``i`` does not depend on ``n``.
    """
    if n < 1:
        if allow_empty and n == 0:
            return torch.zeros(0, side, side, 3)
        raise ValueError("dataset size must be >= 1")
    imgs = [_toy_image(side, np.random.Generator(np.random.Philox(rng.child(f"toy{i}").seed))) for i in range(n)]
    return torch.from_numpy(np.stack(imgs)).to(torch.float32)
