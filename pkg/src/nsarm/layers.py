"""Small building blocks shared by the networks."""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .numerics import Rng


def init_params(module: nn.Module, rng: Rng, std_1d: float = 0.02) -> None:
    """Deterministic fan-in uniform initialisation drawn from ``rng``.

    Biases start at zero and norm gains at one; free-standing vectors and
    embedding tables get a small normal draw.
    """
    g = rng.generator()
    norms = {id(m.weight) for m in module.modules() if isinstance(m, nn.LayerNorm) and m.weight is not None}
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif id(p) in norms:
                p.fill_(1.0)
            elif p.dim() == 1 or name.endswith("emb"):
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std_1d)
            else:
                bound = math.sqrt(3.0 / p[0].numel())
                p.copy_((torch.rand(p.shape, generator=g, dtype=p.dtype) * 2 - 1) * bound)


def to_nchw(x: torch.Tensor) -> torch.Tensor:
    return x.movedim(-1, -3)


def to_nhwc(x: torch.Tensor) -> torch.Tensor:
    return x.movedim(-3, -1)


def flatten_batch(x: torch.Tensor, keep: int) -> tuple[torch.Tensor, tuple[int, ...]]:
    lead = tuple(x.shape[: x.dim() - keep])
    return x.reshape(-1, *x.shape[x.dim() - keep :]), lead


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(F.gelu(x))))
