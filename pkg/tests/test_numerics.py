import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nsarm.numerics import NonFiniteError, Rng, check_finite, grad_check, resize_down, resize_up


def _area_oracle(x: np.ndarray, th: int, tw: int) -> np.ndarray:
    # replicate each cell up to the LCM grid, then take plain block means
    h, w = x.shape[:2]
    lh, lw = math.lcm(h, th), math.lcm(w, tw)
    big = np.repeat(np.repeat(x, lh // h, axis=0), lw // w, axis=1)
    return big.reshape(th, lh // th, tw, lw // tw, -1).mean(axis=(1, 3))


def _bilinear_oracle(x: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w, c = x.shape
    ys = np.linspace(0, h - 1, th) if th > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, tw) if tw > 1 else np.zeros(1)
    rows = np.stack([[np.interp(ys, np.arange(h), x[:, j, ch]) for ch in range(c)] for j in range(w)])  # w, c, th
    rows = rows.transpose(2, 0, 1)  # th, w, c
    return np.stack([[np.interp(xs, np.arange(w), rows[i, :, ch]) for ch in range(c)] for i in range(th)]).transpose(0, 2, 1)


def test_resize_down_examples():
    ones = torch.ones(4, 4, 1)
    assert torch.equal(resize_down(ones, (2, 2)), torch.ones(2, 2, 1))
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    assert resize_down(x, (1, 1)).item() == 2.5
    y = torch.randn(5, 3, 2)
    assert resize_down(y, (5, 3)) is y


def test_resize_up_examples():
    x = torch.full((1, 1, 1), 3.0)
    assert torch.equal(resize_up(x, (4, 4)), torch.full((4, 4, 1), 3.0))
    col = torch.tensor([0.0, 1.0]).reshape(2, 1, 1)
    out = resize_up(col, (5, 1)).reshape(-1)
    assert torch.allclose(out, torch.tensor([0.0, 0.25, 0.5, 0.75, 1.0]))
    y = torch.randn(3, 3, 2)
    assert resize_up(y, (3, 3)) is y


@pytest.mark.parametrize("bad", [(0, 2), (5, 2), (2, -1)])
def test_resize_down_errors(bad):
    with pytest.raises(ValueError):
        resize_down(torch.zeros(4, 4, 1), bad)


def test_resize_up_rejects_smaller_target():
    with pytest.raises(ValueError):
        resize_up(torch.zeros(4, 4, 1), (2, 4))


@pytest.mark.parametrize("src,dst", [((16, 16), (6, 6)), ((16, 12), (12, 8)), ((7, 5), (3, 2)), ((8, 8), (4, 4))])
def test_resize_down_matches_area_oracle(src, dst):
    x = np.random.default_rng(0).standard_normal((*src, 3))
    got = resize_down(torch.from_numpy(x), dst).numpy()
    np.testing.assert_allclose(got, _area_oracle(x, *dst), atol=1e-12)


@pytest.mark.parametrize("src,dst", [((2, 2), (4, 4)), ((4, 6), (16, 16)), ((1, 3), (5, 7)), ((6, 6), (8, 12))])
def test_resize_up_matches_interp_oracle(src, dst):
    x = np.random.default_rng(1).standard_normal((*src, 2))
    got = resize_up(torch.from_numpy(x), dst).numpy()
    np.testing.assert_allclose(got, _bilinear_oracle(x, *dst), atol=1e-12)


def test_resize_keeps_batch_dims():
    x = torch.randn(2, 3, 8, 8, 4)
    assert resize_down(x, (2, 4)).shape == (2, 3, 2, 4, 4)
    assert resize_up(x, (16, 12)).shape == (2, 3, 16, 12, 4)


@pytest.mark.parametrize("s", [2, 3, 4])
def test_down_up_round_trip_constant_fields_exact(s):
    x = torch.full((4, 5, 2), 0.7, dtype=torch.float64)
    back = resize_down(resize_up(x, (4 * s, 5 * s)), (4, 5))
    assert (back - x).abs().max() < 1e-12


@pytest.mark.parametrize("s", [2, 4])
def test_down_up_round_trip_bounded_by_local_variation(s):
    # Corner-aligned bilinear followed by block averaging is a local averaging
    # operator, so the round-trip error is bounded by the largest neighbour step.
    yy, xx = np.meshgrid(np.linspace(0, 1, 8), np.linspace(0, 1, 8), indexing="ij")
    field = np.sin(2 * yy) * np.cos(3 * xx)
    x = torch.from_numpy(field[..., None])
    back = resize_down(resize_up(x, (8 * s, 8 * s)), (8, 8))
    step = max(np.abs(np.diff(field, axis=0)).max(), np.abs(np.diff(field, axis=1)).max())
    assert (back - x).abs().max().item() <= step


def test_rng_reproducible_and_children_independent():
    a, b = Rng(42), Rng(42)
    assert torch.equal(a.randn(3, 4), b.randn(3, 4))
    assert torch.equal(Rng(7).child("x").randn(5), Rng(7).child("x").randn(5))
    assert not torch.equal(Rng(7).child("x").randn(5), Rng(7).child("y").randn(5))
    g1, g2 = Rng(3).generator(), Rng(3).generator()
    assert torch.equal(torch.randn(4, generator=g1), torch.randn(4, generator=g2))


def test_check_finite():
    check_finite(torch.ones(3))
    with pytest.raises(NonFiniteError):
        check_finite(torch.tensor([1.0, float("nan")]))


def test_grad_check_known_gradients():
    x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (x**2).sum(), x, eps=1e-4) < 1e-4
    c = torch.tensor([0.3, -0.2], dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (c * 0).sum() + 5.0, c, eps=1e-4) < 1e-4


def test_grad_check_detects_wrong_gradient():
    x = torch.tensor([0.5, -1.5], dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, v):
            ctx.save_for_backward(v)
            return (v**3).sum()

        @staticmethod
        def backward(ctx, g):
            (v,) = ctx.saved_tensors
            return g * 2 * v

    assert grad_check(lambda: Wrong.apply(x), x) > 0.1


def test_grad_check_rejects_eps_out_of_range():
    x = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: x.sum(), x, eps=0.5)


def test_grad_check_non_finite_objective():
    x = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(NonFiniteError):
        grad_check(lambda: torch.log(x).sum(), x)


def test_resize_gradients():
    x = torch.randn(6, 4, 2, dtype=torch.float64, requires_grad=True)
    w = torch.randn(12, 9, 2, dtype=torch.float64)
    assert grad_check(lambda: (resize_up(x, (12, 9)) * w).sum(), x) < 1e-6
    w2 = torch.randn(3, 2, 2, dtype=torch.float64)
    assert grad_check(lambda: (resize_down(x, (3, 2)) ** 2 * w2).sum(), x) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9))
def test_resize_down_preserves_mean(h, w, th, tw):
    th, tw = min(th, h), min(tw, w)
    x = torch.from_numpy(np.random.default_rng(h * 31 + w).standard_normal((h, w, 1)))
    y = resize_down(x, (th, tw))
    assert abs(y.mean().item() - x.mean().item()) < 1e-10
