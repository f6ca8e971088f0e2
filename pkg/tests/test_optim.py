import math

import pytest
import torch

from nsarm.optim import AdamW, AdamWCfg, AdamWState, adamw_step, clip_grad_norm


def scalar_adamw(p, grads, lr, b1, b2, eps, wd):
    # plain-float AdamW, written out term by term
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


def test_three_step_scalar_oracle():
    cfg = AdamWCfg(lr=0.1, beta1=0.9, beta2=0.99, eps=1e-8, weight_decay=0.01)
    grads = [0.5, -1.5, 2.0]
    p = torch.tensor([1.0], dtype=torch.float64)
    st = AdamWState()
    for g in grads:
        adamw_step([p], [torch.tensor([g], dtype=torch.float64)], st, cfg)
    assert p.item() == pytest.approx(scalar_adamw(1.0, grads, 0.1, 0.9, 0.99, 1e-8, 0.01), abs=1e-14)


def test_matches_torch_adamw():
    torch.manual_seed(0)
    p0 = torch.randn(5, 3, dtype=torch.float64)
    mine, ref = p0.clone(), p0.clone().requires_grad_(True)
    cfg = AdamWCfg(lr=3e-3, beta1=0.8, beta2=0.95, eps=1e-6, weight_decay=0.1)
    opt = torch.optim.AdamW([ref], lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    st = AdamWState()
    for _ in range(6):
        g = torch.randn(5, 3, dtype=torch.float64)
        adamw_step([mine], [g], st, cfg)
        ref.grad = g.clone()
        opt.step()
    assert torch.allclose(mine, ref.detach(), atol=1e-12, rtol=0)


def test_zero_grad_no_decay_keeps_params():
    p = torch.randn(4)
    before = p.clone()
    st = AdamWState()
    for _ in range(3):
        adamw_step([p], [torch.zeros(4)], st, AdamWCfg(lr=0.1))
    assert torch.equal(p, before)


def test_first_step_is_sign_step():
    g = torch.tensor([0.3, -2.0, 1e-3], dtype=torch.float64)
    p = torch.zeros(3, dtype=torch.float64)
    adamw_step([p], [g], AdamWState(), AdamWCfg(lr=0.01, eps=1e-12))
    assert torch.allclose(p, -0.01 * g / g.abs(), atol=1e-9)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step([torch.zeros(3)], [torch.zeros(4)], AdamWState(), AdamWCfg())


def test_invalid_cfg():
    with pytest.raises(ValueError):
        AdamWCfg(lr=0)
    with pytest.raises(ValueError):
        AdamWCfg(beta1=1.0)


def test_clip_grad_norm():
    gs = [torch.tensor([3.0]), torch.tensor([4.0]), None]
    total = clip_grad_norm(gs, 1.0)
    assert total == pytest.approx(5.0)
    assert math.hypot(gs[0].item(), gs[1].item()) == pytest.approx(1.0, rel=1e-6)
    small = [torch.tensor([0.1])]
    clip_grad_norm(small, 1.0)
    assert small[0].item() == pytest.approx(0.1)


def test_wrapper_uses_param_grads():
    p = torch.nn.Parameter(torch.tensor([2.0]))
    opt = AdamW([p], AdamWCfg(lr=0.5), clip=None)
    (p**2).sum().backward()
    opt.step()
    assert p.item() == pytest.approx(1.5)
    opt.zero_grad()
    assert p.grad is None
