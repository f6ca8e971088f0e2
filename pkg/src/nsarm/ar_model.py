"""Block-causal transformer for bitwise next-scale prediction.

The token sequence is the condition block followed by the accumulated inputs
``F~_1..F~_{K-1}``; block ``k`` of the sequence (scale ``k``'s positions) predicts
the ``d`` bits of every token of ``R_k`` in parallel. Block ``k`` attends to blocks
``1..k`` only, so the logits of scale ``k`` depend on ``R_1..R_{k-1}`` alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .bsq import BitTokenMap
from .codec import ResidualQueue
from .layers import init_params
from .numerics import Rng, check_finite
from .schedule import ScaleSchedule, token_count

ScaleLogits = dict[int, torch.Tensor]


@dataclass(frozen=True)
class ArCfg:
    model_dim: int = 64
    depth: int = 3
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")


@dataclass(frozen=True)
class SamplingCfg:
    mode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "stochastic"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "stochastic" and not self.temperature > 0:
            raise ValueError("temperature must be > 0")


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, L, C = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(B, L, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        x = x + self.proj(a.transpose(1, 2).reshape(B, L, C))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class NextScaleTransformer(nn.Module):
    def __init__(self, schedule: ScaleSchedule, cfg: ArCfg = ArCfg(), rng: Rng | None = None):
        super().__init__()
        self.schedule = schedule
        self.cfg = cfg
        C, d, K = cfg.model_dim, schedule.d, schedule.K
        self.L = token_count(schedule, 1, K)
        self.word_embed = nn.Linear(d, C)
        # fixed-prompt conditioning: one learned vector
        self.cond_emb = nn.Parameter(torch.zeros(C))
        self.pos_emb = nn.Parameter(torch.zeros(self.L, C))
        self.lvl_emb = nn.Parameter(torch.zeros(K, C))
        self.blocks = nn.ModuleList(Block(C, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(C)
        # infinite-vocabulary classifier: d independent binary logits per token
        self.head = nn.Linear(C, d)

        level = torch.cat([torch.full((h * w,), k) for k, (h, w) in enumerate(schedule.scales)])
        self.register_buffer("level", level, persistent=False)
        self.register_buffer("allowed", level[:, None] >= level[None, :], persistent=False)
        starts = [0]
        for h, w in schedule.scales:
            starts.append(starts[-1] + h * w)
        self.starts = starts
        init_params(self, rng or Rng(0))

    @property
    def sequence_length(self) -> int:
        """Condition block (scale-1 positions) plus ``F~_1..F~_{K-1}`` at scales ``2..K``."""
        return self.L

    def head_param_count(self) -> int:
        return sum(p.numel() for p in self.head.parameters())

    def _sequence(self, inputs: list[torch.Tensor], upto_k: int, batch: int) -> torch.Tensor:
        h1, w1 = self.schedule.scale(1)
        parts = [self.cond_emb.expand(batch, h1 * w1, -1)]
        for x in inputs[: upto_k - 1]:
            parts.append(self.word_embed(x.reshape(batch, -1, x.shape[-1])))
        seq = torch.cat(parts, dim=1)
        n = seq.shape[1]
        return seq + self.pos_emb[:n] + self.lvl_emb[self.level[:n]]

    def forward_inputs(self, inputs: list[torch.Tensor], upto_k: int) -> torch.Tensor:
        """Logits ``(B, token_count(1..upto_k), d)`` from AR inputs ``F~_1..F~_{upto_k-1}``."""
        if len(inputs) < upto_k - 1:
            raise ValueError(f"need {upto_k - 1} inputs, got {len(inputs)}")
        lead = inputs[0].shape[:-3] if inputs else ()
        batch = int(torch.tensor(lead).prod()) if lead else 1
        for k, x in enumerate(inputs[: upto_k - 1], start=2):
            if tuple(x.shape[-3:]) != (*self.schedule.scale(k), self.schedule.d):
                raise ValueError(f"input for scale {k} has shape {tuple(x.shape)}")
        x = self._sequence(inputs, upto_k, batch)
        n = x.shape[1]
        mask = self.allowed[:n, :n]
        for blk in self.blocks:
            x = blk(x, mask)
        return self.head(self.norm_out(x))

    def _split(self, logits: torch.Tensor, ks, lead) -> ScaleLogits:
        out = {}
        for k in ks:
            h, w = self.schedule.scale(k)
            z = logits[:, self.starts[k - 1] : self.starts[k]]
            out[k] = z.reshape(*lead, h, w, self.schedule.d)
        return out

    def forward_teacher_forced(self, rq: ResidualQueue, predict_from_k: int = 1) -> ScaleLogits:
        """Logits for scales ``predict_from_k..K`` given a complete queue."""
        if rq.schedule.scales != self.schedule.scales or rq.schedule.d != self.schedule.d:
            raise ValueError("queue schedule does not match the model")
        K = self.schedule.K
        if not 1 <= predict_from_k <= K:
            raise ValueError(f"predict_from_k={predict_from_k} outside 1..{K}")
        if len(rq.inputs) != K - 1:
            raise ValueError("teacher forcing needs a complete queue")
        lead = tuple(rq.residuals[0].shape[:-3])
        logits = self.forward_inputs(rq.inputs, K)
        return self._split(logits, range(predict_from_k, K + 1), lead)

    def next_scale_logits(self, prefix: ResidualQueue) -> torch.Tensor:
        """Logits of scale ``m+1`` for a prefix queue holding ``m`` residuals."""
        m = len(prefix.residuals)
        if m >= self.schedule.K:
            raise ValueError("prefix already complete")
        lead = tuple(prefix.residuals[0].shape[:-3]) if m else ()
        if m == 0:
            logits = self.forward_inputs([], 1)
        else:
            logits = self.forward_inputs(prefix.inputs, m + 1)
        return self._split(logits, [m + 1], lead)[m + 1]


def bitwise_ce_loss(
    logits: ScaleLogits,
    labels: dict[int, torch.Tensor],
    scale_range: tuple[int, int] | None = None,
) -> torch.Tensor:
    """Mean binary cross-entropy per bit, averaged within each scale, then across scales.

    ``scale_range`` is an inclusive 1-based ``(lo, hi)``; by default all scales in
    ``logits`` are used.
    """
    ks = sorted(logits) if scale_range is None else list(range(scale_range[0], scale_range[1] + 1))
    if not ks:
        raise ValueError("empty scale range")
    per_scale = []
    for k in ks:
        if k not in logits or k not in labels:
            raise ValueError(f"scale {k} missing from logits or labels")
        z, y = logits[k], labels[k]
        if z.shape != y.shape:
            raise ValueError(f"scale {k}: logits {tuple(z.shape)} vs labels {tuple(y.shape)}")
        if bool(((y != 0) & (y != 1)).any()):
            raise ValueError("labels must be binary")
        per_scale.append(F.binary_cross_entropy_with_logits(z, y.to(z.dtype)))
    loss = torch.stack(per_scale).mean()
    return check_finite(loss, "bitwise cross-entropy")


def queue_labels(rq: ResidualQueue, ks) -> dict[int, torch.Tensor]:
    return {k: rq.labels(k) for k in ks}


def bit_accuracy(logits: ScaleLogits, labels: dict[int, torch.Tensor]) -> float:
    hit = total = 0
    for k, z in logits.items():
        y = labels[k]
        hit += int(((z >= 0).to(torch.uint8) == y).sum())
        total += y.numel()
    return hit / total


def sample_bits(logits: torch.Tensor, sampling: SamplingCfg, generator: torch.Generator | None = None) -> torch.Tensor:
    if sampling.mode == "greedy":
        return (logits >= 0).to(torch.uint8)
    if not sampling.temperature > 0:
        raise ValueError("temperature must be > 0")
    p = torch.sigmoid(logits / sampling.temperature)
    return torch.bernoulli(p, generator=generator).to(torch.uint8)


@torch.no_grad()
def predict_scale(
    model: NextScaleTransformer,
    context: ResidualQueue,
    k: int,
    sampling: SamplingCfg = SamplingCfg(),
    generator: torch.Generator | None = None,
) -> BitTokenMap:
    """Sample the bits of scale ``k`` given a prefix holding scales ``1..k-1``."""
    if len(context.residuals) != k - 1:
        raise ValueError(f"context holds {len(context.residuals)} scales, need {k - 1}")
    return BitTokenMap(sample_bits(model.next_scale_logits(context), sampling, generator))
