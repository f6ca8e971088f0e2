"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch


@dataclass
class AdamWCfg:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class AdamWState:
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamWState,
    cfg: AdamWCfg,
) -> AdamWState:
    """One in-place AdamW update.

    Weight decay is applied first as ``p *= 1 - lr * wd``, then the bias-corrected
    Adam step ``p -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match params")
    state.step += 1
    t = state.step
    bc1 = 1 - cfg.beta1**t
    bc2 = 1 - cfg.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match param {tuple(p.shape)}")
        if cfg.weight_decay:
            p.mul_(1 - cfg.lr * cfg.weight_decay)
        m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
        denom = (v / bc2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m, denom, value=-cfg.lr / bc1)
    return state


@torch.no_grad()
def clip_grad_norm(grads: Sequence[torch.Tensor | None], max_norm: float) -> float:
    present = [g for g in grads if g is not None]
    if not present:
        return 0.0
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in present))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in present:
            g.mul_(scale)
    return total


class AdamW:
    """Stateful wrapper reading ``p.grad`` from a fixed parameter list."""

    def __init__(self, params: Sequence[torch.Tensor], cfg: AdamWCfg, clip: float | None = 1.0):
        self.params = list(params)
        self.cfg = cfg
        self.clip = clip
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        grads = [p.grad for p in self.params]
        norm = clip_grad_norm(grads, self.clip) if self.clip else 0.0
        adamw_step(self.params, grads, self.state, self.cfg)
        return norm
