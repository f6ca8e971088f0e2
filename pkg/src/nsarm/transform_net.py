"""Transformation network: LR image -> the first ``k_t`` residual maps of the pathway."""
from __future__ import annotations

import math

import torch
from torch import nn

from .codec import ResidualQueue
from .layers import ResBlock, flatten_batch, init_params, to_nchw, to_nhwc
from .numerics import Rng, check_finite, resize_down
from .schedule import ScaleSchedule


class TransformNet(nn.Module):
    """Conv trunk to the LR latent grid, then one head per preliminary scale.

    The trunk output has the resolution of scale ``k_t`` (the LR image seen at the
    tokenizer's stride), so no spatial compression happens on the last head. The
    earlier scales area-pool the trunk features before their head.
    """

    def __init__(self, schedule: ScaleSchedule, width: int = 64, rng: Rng | None = None):
        super().__init__()
        self.schedule = schedule
        self.width = width
        # set by stage-1 training and carried through checkpoints
        self.stage1_done = False
        if schedule.factor < 1 or schedule.factor & (schedule.factor - 1):
            raise ValueError("tokenizer factor must be a power of two")
        n_down = int(math.log2(schedule.factor))
        layers: list[nn.Module] = [nn.Conv2d(3, width, 3, padding=1)]
        for _ in range(n_down):
            layers += [nn.GELU(), nn.Conv2d(width, width, 4, stride=2, padding=1)]
        layers += [ResBlock(width), ResBlock(width), nn.GELU()]
        self.trunk = nn.Sequential(*layers)
        self.heads = nn.ModuleList(
            nn.Sequential(nn.Linear(width, width), nn.GELU(), nn.Linear(width, schedule.d))
            for _ in range(schedule.k_t)
        )
        init_params(self, rng or Rng(0))

    @property
    def lr_side(self) -> tuple[int, int]:
        h, w = self.schedule.scale(self.schedule.k_t)
        return h * self.schedule.factor, w * self.schedule.factor

    def forward(self, lr_image: torch.Tensor) -> list[torch.Tensor]:
        """``(..., h, w, 3)`` LR image -> ``k_t`` continuous residuals ``(..., h_k, w_k, d)``."""
        if tuple(lr_image.shape[-3:]) != (*self.lr_side, 3):
            raise ValueError(f"LR image shape {tuple(lr_image.shape)} does not match expected {(*self.lr_side, 3)}")
        x, lead = flatten_batch(lr_image, 3)
        feat = to_nhwc(self.trunk(to_nchw(x) * 2 - 1))
        out = []
        for k, head in enumerate(self.heads, start=1):
            r = head(resize_down(feat, self.schedule.scale(k)))
            out.append(r.reshape(*lead, *r.shape[1:]))
        return out


def transform(tnet: TransformNet, lr_image: torch.Tensor) -> list[torch.Tensor]:
    return tnet(lr_image)


def stage1_loss(pred: list[torch.Tensor], gt_rq: ResidualQueue) -> torch.Tensor:
    """Mean over the first ``k_t`` scales of the per-element squared error to GT residuals."""
    k_t = gt_rq.schedule.k_t
    if len(pred) != k_t:
        raise ValueError(f"expected {k_t} predicted scales, got {len(pred)}")
    if len(gt_rq.residuals) < k_t:
        raise ValueError("GT queue shorter than k_t")
    terms = []
    for k, (p, r) in enumerate(zip(pred, gt_rq.residuals), start=1):
        if p.shape != r.shape:
            raise ValueError(f"scale {k}: prediction {tuple(p.shape)} vs GT {tuple(r.shape)}")
        terms.append((p - r.detach()).pow(2).mean())
    return check_finite(torch.stack(terms).mean(), "stage-1 loss")
