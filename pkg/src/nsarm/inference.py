"""Progressive-scale generation: super-resolution and pathway replacement.

Both entry points fill a residual prefix (from ``T(lr)`` or from a reference
decomposition) and hand it to the same continuation loop, which samples the
remaining scales one at a time and decodes the accumulated latent.
"""
from __future__ import annotations

from typing import Sequence

import torch

from . import bsq
from .ar_model import NextScaleTransformer, SamplingCfg, sample_bits
from .autoencoder import Autoencoder
from .codec import ResidualQueue, accumulate, decompose, from_residuals
from .transform_net import TransformNet


@torch.no_grad()
def continue_generation(
    ar: NextScaleTransformer,
    prefix: Sequence[torch.Tensor],
    sampling: SamplingCfg = SamplingCfg(),
    batch_shape: tuple[int, ...] = (),
) -> ResidualQueue:
    """Sample scales ``len(prefix)+1..K`` after a residual prefix.

    ``batch_shape`` is only consulted when the prefix is empty.
    """
    schedule = ar.schedule
    if len(prefix) > schedule.K:
        raise ValueError("prefix longer than schedule")
    gen = torch.Generator().manual_seed(sampling.seed)
    residuals = list(prefix)
    for k in range(len(residuals) + 1, schedule.K + 1):
        if residuals:
            logits = ar.next_scale_logits(from_residuals(residuals, schedule))
        else:
            h, w = schedule.scale(1)
            logits = ar.forward_inputs([], 1).reshape(h, w, schedule.d).expand(*batch_shape, h, w, schedule.d)
        bits = sample_bits(logits, sampling, gen)
        residuals.append(bsq.dequantize(bits))
    return from_residuals(residuals, schedule)


def preliminary_residuals(tnet: TransformNet, lr_image: torch.Tensor) -> list[torch.Tensor]:
    return [bsq.bsq(r) for r in tnet(lr_image)]


@torch.no_grad()
def super_resolve(
    ar: NextScaleTransformer,
    tnet: TransformNet,
    tokenizer: Autoencoder,
    lr_image: torch.Tensor,
    sampling: SamplingCfg = SamplingCfg(),
) -> torch.Tensor:
    """``(..., h, w, 3)`` LR image -> ``(..., h*s, w*s, 3)`` HR image in [0, 1]."""
    if ar.schedule != tnet.schedule:
        raise ValueError("AR model and transformation network use different schedules")
    rq = continue_generation(ar, preliminary_residuals(tnet, lr_image), sampling)
    return tokenizer.decode(accumulate(rq))


@torch.no_grad()
def pathway_replace_generate(
    ar: NextScaleTransformer,
    tokenizer: Autoencoder,
    ref_image: torch.Tensor,
    k_replace: int,
    sampling: SamplingCfg = SamplingCfg(),
) -> tuple[torch.Tensor, ResidualQueue]:
    """Splice the first ``k_replace`` residuals of ``ref_image`` and generate the rest.

    Returns the decoded image and the full residual queue.
    """
    schedule = ar.schedule
    if not 0 <= k_replace <= schedule.K:
        raise ValueError(f"k_replace={k_replace} outside 0..{schedule.K}")
    ref = decompose(tokenizer.encode(ref_image), schedule)
    rq = continue_generation(ar, ref.residuals[:k_replace], sampling, tuple(ref_image.shape[:-3]))
    return tokenizer.decode(accumulate(rq)), rq


def latent_distance(rq: ResidualQueue, ref_latent: torch.Tensor) -> torch.Tensor:
    """L2 norm of ``accumulate(rq) - ref_latent`` over ``(h, w, d)``, one value per image."""
    diff = accumulate(rq) - ref_latent
    return diff.flatten(-3).norm(dim=-1)
