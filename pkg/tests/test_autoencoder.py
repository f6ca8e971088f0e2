import pytest
import torch

from nsarm import bsq
from nsarm.autoencoder import Autoencoder, AutoencoderCfg, reconstruction_loss, train_tokenizer
from nsarm.degradation import make_toy_dataset
from nsarm.numerics import Rng, grad_check
from nsarm.schedule import ScaleSchedule

TINY = ScaleSchedule(((1, 1), (2, 2), (4, 4)), k_t=2, d=4, factor=2)


def tiny_ae(seed=0):
    return Autoencoder(AutoencoderCfg(d=4, factor=2, width=8), Rng(seed))


def test_shapes():
    ae = tiny_ae()
    x = torch.rand(2, 8, 8, 3)
    with torch.no_grad():
        z = ae.encode(x)
        y = ae.decode(z)
    assert z.shape == (2, 4, 4, 4)
    assert y.shape == x.shape
    assert float(y.min()) >= 0 and float(y.max()) <= 1
    assert ae.reconstruct(x[0], TINY).shape == (8, 8, 3)


def test_desk_factor_four():
    ae = Autoencoder(AutoencoderCfg(d=16, factor=4, width=16), Rng(0))
    assert ae.encode(torch.rand(64, 64, 3)).shape == (16, 16, 16)


def test_validation():
    with pytest.raises(ValueError):
        AutoencoderCfg(factor=3)
    ae = tiny_ae()
    with pytest.raises(ValueError):
        ae.encode(torch.rand(7, 8, 3))
    with pytest.raises(ValueError):
        ae.decode(torch.rand(4, 4, 5))


def test_init_is_seeded():
    a, b, c = tiny_ae(1), tiny_ae(1), tiny_ae(2)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)


def test_reconstruction_loss_gradient_check():
    ae = tiny_ae(3).double()
    x = torch.rand(2, 8, 8, 3, dtype=torch.float64)
    err = grad_check(lambda: reconstruction_loss(ae, x, TINY, bsq.relaxed), list(ae.parameters()), max_coords=200, rng=Rng(0))
    assert err < 1e-3


def test_training_reduces_loss_and_freezes():
    data = make_toy_dataset(16, 8, Rng(0))
    ae, hist = train_tokenizer(data, TINY, epochs=6, rng=Rng(1), model=tiny_ae(), lr=3e-3, batch_size=8)
    assert len(hist) == 12
    assert sum(hist[-2:]) < sum(hist[:2])
    assert not any(p.requires_grad for p in ae.parameters())
    again, hist2 = train_tokenizer(data, TINY, epochs=6, rng=Rng(1), model=tiny_ae(), lr=3e-3, batch_size=8)
    assert hist == hist2
