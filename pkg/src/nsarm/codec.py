"""Multi-scale residual decomposition of latents and its cascaded (spliced) variant.

For a latent ``F`` and a schedule of scales ``(h_k, w_k)``::

    R_k  = Q(down(F - F_{k-1}, (h_k, w_k)))
    F_k  = sum_{i<=k} up(R_i, (h, w))          F_0 = 0
    F~_k = down(F_k, (h_{k+1}, w_{k+1}))       inputs for predicting scale k+1

``cascaded_modify`` replaces ``R_1..R_{k_t}`` with externally supplied residuals and
recomputes every later residual against the same ``F``, which yields the modified
labels used for fine-tuning.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from . import bsq
from .numerics import resize_down, resize_up
from .schedule import ScaleSchedule

Quantizer = Callable[[torch.Tensor], torch.Tensor]

STREAM_MAGIC = b"NSTK"
STREAM_VERSION = 1


@dataclass
class ResidualQueue:
    """Per-scale residuals ``R_1..R_K`` and AR inputs ``F~_1..F~_{K-1}``.

    Tensors may carry leading batch dimensions. A queue built from a partial prefix
    has fewer than ``K`` residuals and one input per residual (bounded by ``K-1``).
    """

    residuals: list[torch.Tensor]
    inputs: list[torch.Tensor]
    schedule: ScaleSchedule

    def __post_init__(self):
        if len(self.residuals) > self.schedule.K:
            raise ValueError("more residuals than scheduled scales")
        for k, r in enumerate(self.residuals, start=1):
            if tuple(r.shape[-3:]) != (*self.schedule.scale(k), self.schedule.d):
                raise ValueError(f"residual {k} has shape {tuple(r.shape)}, expected {(*self.schedule.scale(k), self.schedule.d)}")
        if len(self.inputs) != min(len(self.residuals), self.schedule.K - 1):
            raise ValueError("inputs do not match residual count")

    @property
    def complete(self) -> bool:
        return len(self.residuals) == self.schedule.K

    def labels(self, k: int) -> torch.Tensor:
        """Bit labels of scale ``k`` (valid for BSQ-quantized residuals)."""
        return (self.residuals[k - 1] >= 0).to(torch.uint8)

    def detach(self) -> "ResidualQueue":
        return ResidualQueue([r.detach() for r in self.residuals], [x.detach() for x in self.inputs], self.schedule)


def _check_latent(f: torch.Tensor, schedule: ScaleSchedule) -> None:
    if tuple(f.shape[-3:]) != (*schedule.latent_shape, schedule.d):
        raise ValueError(f"latent shape {tuple(f.shape[-3:])} does not match schedule {(*schedule.latent_shape, schedule.d)}")


def _build(
    f: torch.Tensor | None,
    schedule: ScaleSchedule,
    quantizer: Quantizer,
    prefix: Sequence[torch.Tensor],
    upto: int | None = None,
) -> ResidualQueue:
    full = schedule.latent_shape
    upto = schedule.K if upto is None else upto
    residuals: list[torch.Tensor] = []
    inputs: list[torch.Tensor] = []
    acc = None
    for k in range(1, upto + 1):
        if k <= len(prefix):
            r = prefix[k - 1]
        else:
            remaining = f if acc is None else f - acc
            r = quantizer(resize_down(remaining, schedule.scale(k)))
        residuals.append(r)
        up = resize_up(r, full)
        acc = up if acc is None else acc + up
        if k < schedule.K:
            inputs.append(resize_down(acc, schedule.scale(k + 1)))
    return ResidualQueue(residuals, inputs, schedule)


def decompose(f: torch.Tensor, schedule: ScaleSchedule, quantizer: Quantizer = bsq.bsq) -> ResidualQueue:
    """Split latent ``f`` of shape ``(..., h, w, d)`` into the residual queue."""
    _check_latent(f, schedule)
    return _build(f, schedule, quantizer, ())


def cascaded_modify(
    f: torch.Tensor,
    schedule: ScaleSchedule,
    r_prime: Sequence[torch.Tensor],
    quantizer: Quantizer = bsq.bsq,
) -> ResidualQueue:
    """Splice ``r_prime`` as scales ``1..k_t`` and re-derive the rest against ``f``."""
    _check_latent(f, schedule)
    if len(r_prime) != schedule.k_t:
        raise ValueError(f"expected {schedule.k_t} spliced residuals, got {len(r_prime)}")
    return splice(f, schedule, r_prime, quantizer)


def splice(
    f: torch.Tensor,
    schedule: ScaleSchedule,
    prefix: Sequence[torch.Tensor],
    quantizer: Quantizer = bsq.bsq,
) -> ResidualQueue:
    """Like ``cascaded_modify`` with a prefix of any length ``0..K``."""
    _check_latent(f, schedule)
    if len(prefix) > schedule.K:
        raise ValueError("prefix longer than schedule")
    for k, r in enumerate(prefix, start=1):
        if tuple(r.shape[-3:]) != (*schedule.scale(k), schedule.d):
            raise ValueError(f"spliced residual {k} has shape {tuple(r.shape[-3:])}, expected {(*schedule.scale(k), schedule.d)}")
    return _build(f, schedule, quantizer, prefix)


def from_residuals(residuals: Sequence[torch.Tensor], schedule: ScaleSchedule) -> ResidualQueue:
    """Queue holding only the given (possibly partial) residual prefix."""
    return _build(None, schedule, bsq.identity, residuals, upto=len(residuals))


def accumulate(rq: ResidualQueue, upto_k: int | None = None) -> torch.Tensor:
    """``F_k = sum_{i<=k} up(R_i, (h, w))``; ``upto_k = 0`` gives the zero latent."""
    upto_k = len(rq.residuals) if upto_k is None else upto_k
    if not 0 <= upto_k <= len(rq.residuals):
        raise ValueError(f"upto_k={upto_k} outside 0..{len(rq.residuals)}")
    full = rq.schedule.latent_shape
    if upto_k == 0:
        r0 = rq.residuals[0]
        return r0.new_zeros(*r0.shape[:-3], *full, rq.schedule.d)
    acc = None
    for r in rq.residuals[:upto_k]:
        up = resize_up(r, full)
        acc = up if acc is None else acc + up
    return acc


def write_token_stream(rq: ResidualQueue) -> bytes:
    """Serialise the bit labels of a single (unbatched) queue.

    Layout (little-endian): ``b"NSTK"``, u32 version, u32 K, then per scale a
    header ``u32 k, u32 h_k, u32 w_k, u32 d`` followed by ``pack_bits`` payload.
    """
    if rq.residuals[0].dim() != 3:
        raise ValueError("token streams hold one image; drop batch dimensions first")
    out = [STREAM_MAGIC, struct.pack("<II", STREAM_VERSION, len(rq.residuals))]
    for k in range(1, len(rq.residuals) + 1):
        h, w = rq.schedule.scale(k)
        out.append(struct.pack("<IIII", k, h, w, rq.schedule.d))
        out.append(bsq.pack_bits(bsq.BitTokenMap(rq.labels(k))))
    return b"".join(out)


def read_token_stream(data: bytes) -> list[bsq.BitTokenMap]:
    if data[:4] != STREAM_MAGIC:
        raise ValueError("not a token stream")
    version, count = struct.unpack_from("<II", data, 4)
    if version != STREAM_VERSION:
        raise ValueError(f"unsupported token stream version {version}")
    pos = 12
    maps = []
    for expect_k in range(1, count + 1):
        k, h, w, d = struct.unpack_from("<IIII", data, pos)
        pos += 16
        if k != expect_k:
            raise ValueError(f"scale header out of order: {k}")
        n = (h * w * d + 7) // 8
        maps.append(bsq.unpack_bits(data[pos : pos + n], (h, w), d))
        pos += n
    if pos != len(data):
        raise ValueError("trailing bytes in token stream")
    return maps
