"""Binary spherical quantization of ``d``-dimensional token vectors.

A token ``v`` is projected onto the unit sphere and snapped to the nearest vertex
of the scaled sign lattice ``{-1/sqrt(d), +1/sqrt(d)}^d``; the ``d`` signs are the
token's bits, so the implicit vocabulary has ``2^d`` entries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import check_finite

NORM_EPS = 1e-8


@dataclass(frozen=True)
class BitTokenMap:
    """Bits of shape ``(..., h, w, d)`` stored as ``uint8`` zeros and ones."""

    bits: torch.Tensor

    def __post_init__(self):
        if self.bits.dtype != torch.uint8:
            object.__setattr__(self, "bits", self.bits.to(torch.uint8))
        if self.bits.dim() < 3:
            raise ValueError("bit map needs at least (h, w, d) dimensions")
        if bool((self.bits > 1).any()):
            raise ValueError("bit map entries must be 0 or 1")

    @property
    def d(self) -> int:
        return self.bits.shape[-1]

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.bits.shape[-3:-1])

    def __eq__(self, other):
        return isinstance(other, BitTokenMap) and torch.equal(self.bits, other.bits)


def normalize(v: torch.Tensor) -> torch.Tensor:
    """Unit-normalise the last axis; vectors with norm <= eps map to the all-positive vertex."""
    d = v.shape[-1]
    norm = v.norm(dim=-1, keepdim=True)
    safe = torch.where(norm > NORM_EPS, norm, torch.ones_like(norm))
    unit = v / safe
    vertex = torch.full_like(v, 1.0 / math.sqrt(d))
    return torch.where(norm > NORM_EPS, unit, vertex)


def dequantize(tokens: BitTokenMap | torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    bits = tokens.bits if isinstance(tokens, BitTokenMap) else tokens
    d = bits.shape[-1]
    return (2.0 * bits.to(dtype) - 1.0) / math.sqrt(d)


def quantize(r: torch.Tensor, d: int | None = None) -> tuple[BitTokenMap, torch.Tensor]:
    """Quantize ``r`` of shape ``(..., h, w, d)``.

    Returns the bit map and the dequantized values. The values carry a
    straight-through gradient: their backward pass is that of ``normalize(r)``.
    Zero components (ties) map to bit 1.
    """
    if d is not None and r.shape[-1] != d:
        raise ValueError(f"token width {r.shape[-1]} does not match configured d={d}")
    if r.shape[-1] < 1:
        raise ValueError("d must be >= 1")
    # a NaN compares false and would silently become bit 0
    check_finite(r.detach(), "quantizer input")
    bits = (r >= 0).to(torch.uint8)
    rq = dequantize(bits, dtype=r.dtype)
    if r.requires_grad:
        u = normalize(r)
        rq = u + (rq - u).detach()
    return BitTokenMap(bits), rq


def bsq(r: torch.Tensor) -> torch.Tensor:
    """Quantizer callable for the residual codec: dequantized values only."""
    return quantize(r)[1]


def relaxed(r: torch.Tensor) -> torch.Tensor:
    """Smooth surrogate of ``bsq`` (the straight-through backward, used as forward).

    Only for finite-difference verification of pipelines whose real forward is
    piecewise constant.
    """
    return normalize(r)


def identity(r: torch.Tensor) -> torch.Tensor:
    return r


def pack_bits(tokens: BitTokenMap) -> bytes:
    """Row-major tokens, then bit index; bit ``j`` of the stream is bit ``j % 8`` (LSB first) of byte ``j // 8``."""
    flat = tokens.bits.reshape(-1).cpu().numpy().astype(np.uint8)
    return np.packbits(flat, bitorder="little").tobytes()


def unpack_bits(data: bytes, shape: tuple[int, ...], d: int) -> BitTokenMap:
    n = int(np.prod(shape)) * d
    expected = (n + 7) // 8
    if len(data) != expected:
        raise ValueError(f"expected {expected} bytes for {n} bits, got {len(data)}")
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[:n]
    if n % 8 and bool(np.unpackbits(np.frombuffer(data[-1:], dtype=np.uint8), bitorder="little")[n % 8 :].any()):
        raise ValueError("non-zero padding bits")
    return BitTokenMap(torch.from_numpy(flat.reshape(*shape, d).copy()))
