import pytest
import torch

from nsarm.codec import decompose
from nsarm.numerics import Rng, grad_check
from nsarm.schedule import ScaleSchedule, infinity_default_schedule
from nsarm.transform_net import TransformNet, stage1_loss, transform


def test_desk_shapes():
    s = infinity_default_schedule(64)
    t = TransformNet(s, width=16, rng=Rng(0))
    out = transform(t, torch.rand(16, 16, 3))
    assert [tuple(r.shape) for r in out] == [(1, 1, 16), (2, 2, 16), (4, 4, 16)]
    batched = t(torch.rand(5, 16, 16, 3))
    assert batched[2].shape == (5, 4, 4, 16)


def test_1024_preset_shapes():
    s = infinity_default_schedule(1024)
    t = TransformNet(s, width=4, rng=Rng(0))
    out = t(torch.rand(256, 256, 3))
    pixel = [h * s.factor for h, _ in (r.shape[:2] for r in out)]
    assert pixel == [16, 32, 64, 96, 128, 192, 256]
    # the last preliminary scale is the LR image at tokenizer stride
    assert out[-1].shape[:2] == (16, 16)


def test_deterministic():
    s = infinity_default_schedule(64)
    x = torch.rand(16, 16, 3)
    a = TransformNet(s, 16, Rng(4))(x)
    b = TransformNet(s, 16, Rng(4))(x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_shape_mismatch():
    t = TransformNet(infinity_default_schedule(64), 16, Rng(0))
    with pytest.raises(ValueError):
        t(torch.rand(32, 32, 3))


def test_stage1_loss_examples():
    s = infinity_default_schedule(64)
    gt = decompose(torch.randn(16, 16, 16), s)
    pred = [r.clone() for r in gt.residuals[: s.k_t]]
    assert stage1_loss(pred, gt).item() == 0.0
    delta = 0.3
    shifted = [r + delta for r in pred]
    assert stage1_loss(shifted, gt).item() == pytest.approx(delta**2, rel=1e-5)
    with pytest.raises(ValueError):
        stage1_loss(pred[:-1], gt)
    with pytest.raises(ValueError):
        stage1_loss([pred[1], pred[0], pred[2]], gt)


def test_stage1_loss_positive_off_target():
    s = infinity_default_schedule(64)
    gt = decompose(torch.randn(16, 16, 16), s)
    pred = [r.clone() for r in gt.residuals[: s.k_t]]
    pred[0][0, 0, 0] += 1e-3
    assert stage1_loss(pred, gt).item() > 0


def test_stage1_gradient_check():
    s = ScaleSchedule(((1, 1), (2, 2), (4, 4)), k_t=2, d=4, factor=2)
    t = TransformNet(s, width=4, rng=Rng(1)).double()
    lr = torch.rand(3, 4, 4, 3, dtype=torch.float64)
    gt = decompose(torch.randn(3, 4, 4, 4, dtype=torch.float64), s)
    err = grad_check(lambda: stage1_loss(t(lr), gt), list(t.parameters()), max_coords=200, rng=Rng(0))
    assert err < 1e-3
