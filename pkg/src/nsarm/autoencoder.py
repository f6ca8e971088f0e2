"""Convolutional image tokenizer: images <-> latents ``F`` of shape ``(h, w, d)``.

The encoder/decoder pair is trained through the multi-scale BSQ codec with
straight-through gradients, then frozen for the super-resolution stages.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from . import bsq
from .codec import Quantizer, accumulate, decompose
from .layers import ResBlock, flatten_batch, init_params, to_nchw, to_nhwc
from .numerics import NonFiniteError, Rng
from .optim import AdamW, AdamWCfg
from .schedule import ScaleSchedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AutoencoderCfg:
    d: int = 16
    factor: int = 4
    width: int = 64

    def __post_init__(self):
        if self.factor < 1 or self.factor & (self.factor - 1):
            raise ValueError("downsample factor must be a power of two")


class Autoencoder(nn.Module):
    def __init__(self, cfg: AutoencoderCfg = AutoencoderCfg(), rng: Rng | None = None):
        super().__init__()
        self.cfg = cfg
        w, n_down = cfg.width, int(math.log2(cfg.factor))

        enc: list[nn.Module] = [nn.Conv2d(3, w // 2, 3, padding=1)]
        ch = w // 2
        for _ in range(n_down):
            enc += [nn.GELU(), nn.Conv2d(ch, w, 4, stride=2, padding=1)]
            ch = w
        enc += [ResBlock(w), nn.GELU(), nn.Conv2d(w, cfg.d, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(cfg.d, w, 3, padding=1), ResBlock(w)]
        for i in range(n_down):
            out = w // 2 if i == n_down - 1 else w
            dec += [nn.GELU(), nn.ConvTranspose2d(w, out, 4, stride=2, padding=1)]
        dec += [nn.GELU(), nn.Conv2d(w // 2 if n_down else w, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        init_params(self, rng or Rng(0))

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """``(..., H, W, 3)`` image in [0, 1] -> ``(..., H/factor, W/factor, d)`` latent."""
        H, W = image.shape[-3], image.shape[-2]
        if image.shape[-1] != 3:
            raise ValueError("expected an RGB image with a trailing channel axis")
        if H % self.cfg.factor or W % self.cfg.factor:
            raise ValueError(f"image {H}x{W} not divisible by factor {self.cfg.factor}")
        x, lead = flatten_batch(image, 3)
        z = to_nhwc(self.encoder(to_nchw(x) * 2 - 1))
        return z.reshape(*lead, *z.shape[1:])

    def decode_raw(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.shape[-1] != self.cfg.d:
            raise ValueError(f"latent width {latent.shape[-1]} does not match d={self.cfg.d}")
        x, lead = flatten_batch(latent, 3)
        y = to_nhwc(self.decoder(to_nchw(x))) * 0.5 + 0.5
        return y.reshape(*lead, *y.shape[1:])

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Latent -> image clamped to [0, 1]."""
        return self.decode_raw(latent).clamp(0.0, 1.0)

    def reconstruct(self, image: torch.Tensor, schedule: ScaleSchedule, quantizer: Quantizer = bsq.bsq) -> torch.Tensor:
        return self.decode(accumulate(decompose(self.encode(image), schedule, quantizer)))


def reconstruction_loss(
    model: Autoencoder, images: torch.Tensor, schedule: ScaleSchedule, quantizer: Quantizer = bsq.bsq
) -> torch.Tensor:
    """Pixel MSE of the tokenizer round trip through the multi-scale codec."""
    latent = model.encode(images)
    rec = model.decode_raw(accumulate(decompose(latent, schedule, quantizer)))
    return F.mse_loss(rec, images)


def train_tokenizer(
    dataset: torch.Tensor,
    schedule: ScaleSchedule,
    epochs: int,
    rng: Rng,
    model: Autoencoder | None = None,
    lr: float = 1e-3,
    batch_size: int = 16,
) -> tuple[Autoencoder, list[float]]:
    """Train the tokenizer on ``dataset`` of shape ``(N, H, W, 3)``; returns the model and per-step losses."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if model is None:
        model = Autoencoder(AutoencoderCfg(d=schedule.d, factor=schedule.factor), rng.child("init"))
    opt = AdamW(list(model.parameters()), AdamWCfg(lr=lr))
    order_rng = rng.child("order")
    history: list[float] = []
    for epoch in range(epochs):
        perm = torch.from_numpy(order_rng.numpy.permutation(len(dataset)))
        for i in range(0, len(dataset), batch_size):
            batch = dataset[perm[i : i + batch_size]]
            opt.zero_grad()
            loss = reconstruction_loss(model, batch, schedule)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"tokenizer loss diverged at epoch {epoch}, step {len(history)}")
            loss.backward()
            opt.step()
            history.append(loss.item())
        log.info("tokenizer epoch %d loss %.5f", epoch, sum(history[-10:]) / min(10, len(history)))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, history
