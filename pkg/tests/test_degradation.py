import numpy as np
import pytest
import torch

from nsarm.degradation import PRESETS, DegradationCfg, degrade, degrade_batch, gaussian_blur, make_toy_dataset
from nsarm.numerics import Rng, resize_down


def test_toy_dataset_shape_range_and_prefix_stability():
    a = make_toy_dataset(6, 32, Rng(3))
    b = make_toy_dataset(3, 32, Rng(3))
    assert a.shape == (6, 32, 32, 3) and a.dtype == torch.float32
    assert float(a.min()) >= 0 and float(a.max()) <= 1
    assert torch.equal(a[:3], b)
    assert not torch.equal(a[0], a[1])


def test_toy_dataset_size_checks():
    with pytest.raises(ValueError):
        make_toy_dataset(0, 32, Rng(0))
    assert make_toy_dataset(0, 32, Rng(0), allow_empty=True).shape == (0, 32, 32, 3)


def test_none_preset_is_area_downsample():
    img = make_toy_dataset(1, 32, Rng(1))[0]
    lr = degrade(img, PRESETS["none"], Rng(0))
    assert lr.shape == (8, 8, 3)
    assert torch.allclose(lr, resize_down(img, (8, 8)).clamp(0, 1))


def test_blur_preserves_constants_and_mass():
    c = torch.full((12, 12, 3), 0.4)
    assert torch.allclose(gaussian_blur(c, 1.3), c, atol=1e-6)
    x = torch.rand(16, 16, 1, dtype=torch.float64)
    y = gaussian_blur(x, 0.8)
    assert y.shape == x.shape
    assert float(y.std()) < float(x.std())
    assert torch.equal(gaussian_blur(x, 0.0), x)


def test_blur_kernel_matches_direct_sum():
    # independent loop over the reflect-padded neighbourhood
    x = torch.rand(9, 7, 1, dtype=torch.float64)
    sigma = 1.1
    r = 4
    t = np.arange(-r, r + 1)
    k = np.exp(-(t**2) / (2 * sigma**2))
    k /= k.sum()
    a = x[..., 0].numpy()
    pad = np.pad(a, r, mode="reflect")
    want = np.zeros_like(a)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            want[i, j] = sum(k[u] * k[v] * pad[i + u, j + v] for u in range(2 * r + 1) for v in range(2 * r + 1))
    got = gaussian_blur(x, sigma)[..., 0].numpy()
    assert np.allclose(got, want, atol=1e-12)


def test_degrade_deterministic_and_seed_sensitive():
    img = make_toy_dataset(2, 32, Rng(2))
    a = degrade_batch(img, PRESETS["severe"], Rng(7))
    b = degrade_batch(img, PRESETS["severe"], Rng(7))
    c = degrade_batch(img, PRESETS["severe"], Rng(8))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert a.shape == (2, 8, 8, 3)
    assert float(a.min()) >= 0 and float(a.max()) <= 1


def test_cfg_validation():
    with pytest.raises(ValueError):
        DegradationCfg(blur_sigma_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        DegradationCfg(noise_std_range=(-0.1, 0.1))
    with pytest.raises(ValueError):
        degrade(torch.zeros(30, 30, 3), DegradationCfg(), Rng(0))
