"""Tensor substrate: resampling operators, seeded RNG and a finite-difference gradient checker.

Spatial tensors are channel-last, ``(..., h, w, c)``, with any number of leading
batch dimensions. Resampling is expressed as a pair of dense per-axis matrices so
both operators are linear, differentiable and free of layout permutes.
"""
from __future__ import annotations

import hashlib
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import torch


class NonFiniteError(FloatingPointError):
    """Raised when a public operation would emit NaN or Inf."""


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


class Rng:
    """Seeded generator owned by one component.

    Draws come from a Philox (counter-based) numpy generator; torch generators are
    seeded from it so model initialisation is reproducible too. ``child`` derives an
    independent stream from a string key without touching this stream's state.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.numpy = np.random.Generator(np.random.Philox(self.seed))

    def child(self, key: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}:{key}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self.numpy.integers(0, 2**63 - 1)))
        return g

    def randn(self, *shape: int, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.numpy.standard_normal(shape)).to(dtype)

    def uniform(self, low: float, high: float) -> float:
        return float(self.numpy.uniform(low, high)) if high > low else float(low)


def _check_target(src: Sequence[int], dst: Sequence[int]) -> None:
    if len(dst) != 2 or any(int(t) <= 0 for t in dst):
        raise ValueError(f"target must be two positive sizes, got {tuple(dst)}")
    if any(int(s) <= 0 for s in src):
        raise ValueError(f"source has a zero dimension: {tuple(src)}")


@lru_cache(maxsize=256)
def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Row i averages source cells overlapping [i*n_in/n_out, (i+1)*n_in/n_out),
    # weighted by overlap length.
    m = np.zeros((n_out, n_in), dtype=np.float64)
    step = n_in / n_out
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap / step
    return m


@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Corner-aligned: output sample i sits at source coordinate i*(n_in-1)/(n_out-1).
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        pos = i * scale
        j = min(int(np.floor(pos)), n_in - 2)
        frac = pos - j
        m[i, j] += 1.0 - frac
        m[i, j + 1] += frac
    return m


def _apply_axes(x: torch.Tensor, mh: np.ndarray, mw: np.ndarray) -> torch.Tensor:
    a = torch.as_tensor(mh, dtype=x.dtype)
    b = torch.as_tensor(mw, dtype=x.dtype)
    return torch.einsum("ip,...pqc,jq->...ijc", a, x, b)


def resize_down(x: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
    """Area-average ``x`` of shape ``(..., h, w, c)`` down to ``target = (h', w')``."""
    h, w = x.shape[-3], x.shape[-2]
    _check_target((h, w), target)
    th, tw = int(target[0]), int(target[1])
    if th > h or tw > w:
        raise ValueError(f"resize_down target {target} exceeds source {(h, w)}")
    if (th, tw) == (h, w):
        return x
    return _apply_axes(x, _area_matrix(h, th), _area_matrix(w, tw))


def resize_up(x: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
    """Corner-aligned bilinear upsampling of ``(..., h, w, c)`` to ``target``."""
    h, w = x.shape[-3], x.shape[-2]
    _check_target((h, w), target)
    th, tw = int(target[0]), int(target[1])
    if th < h or tw < w:
        raise ValueError(f"resize_up target {target} is smaller than source {(h, w)}")
    if (th, tw) == (h, w):
        return x
    return _apply_axes(x, _bilinear_matrix(h, th), _bilinear_matrix(w, tw))


def upsample_nearest(x: torch.Tensor, factor: int) -> torch.Tensor:
    return x.repeat_interleave(factor, dim=-3).repeat_interleave(factor, dim=-2)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: torch.Tensor | Sequence[torch.Tensor],
    eps: float = 1e-4,
    max_coords: int | None = None,
    rng: Rng | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``f`` is a closure returning a scalar and reading ``params`` in place; run it in
    float64 for meaningful results. Per coordinate the error is
    ``|a - n| / max(|a|, |n|, floor)``. ``max_coords`` samples a random subset of
    coordinates (uniformly over all parameters) when the full sweep is too slow.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-5, 1e-2]")
    if isinstance(params, torch.Tensor):
        params = [params]
    params = list(params)

    for p in params:
        p.grad = None
    with torch.enable_grad():
        out = f()
        check_finite(out.detach(), "objective")
        analytic = torch.autograd.grad(out, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]

    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or Rng(0)
        pick = rng.numpy.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    with torch.no_grad():
        for pi, j in coords:
            flat = params[pi].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            fp = f().item()
            flat[j] = orig - eps
            fm = f().item()
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("objective is non-finite at a perturbed point")
            numeric = (fp - fm) / (2 * eps)
            a = analytic[pi].reshape(-1)[j].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
