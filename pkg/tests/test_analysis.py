import numpy as np
import pytest
import torch

from layersplit import ConfigError
from layersplit.analysis import (
    active_channels,
    feature_grid,
    image_oracle,
    pixel_energy,
    pixel_oracle,
    solve_images,
    toy_images,
)
from layersplit.losses import LossWeights, PredictionSet, total_loss
from layersplit.model import NetConfig, build_network


def closed_form_b(i1, i2, l1, l2):
    """Stationary point of the reduced objective along b_high with b_low = min, r_low = 0."""
    lo, hi = min(i1, i2), max(i1, i2)
    delta = np.clip((l2 / 2 - 1) / (1.5 * l1), 0, hi - lo)
    return (lo + delta, lo) if i1 >= i2 else (lo, lo + delta)


def brute_force(i1, i2, l1, l2, n=41):
    g = np.linspace(0, 1, n)
    b1, b2, r1, r2 = np.meshgrid(g, g, g, g, indexing="ij")
    e = pixel_energy(b1, b2, r1, r2, i1, i2, l1, l2)
    return float(e.min())


def test_pixel_energy_matches_loss_module():
    rng = np.random.default_rng(0)
    vals = rng.uniform(size=(6, 4, 4, 3))
    w = LossWeights(15, 20)
    ref = float(total_loss(PredictionSet(list(vals[:2]), list(vals[2:4]), list(vals[4:])), w).total)
    ours = pixel_energy(*vals, 15, 20).mean()
    assert ours == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("i1,i2", [(0.8, 0.5), (0.8, 0.0), (0.3, 0.9), (0.4, 0.4), (1.0, 0.2)])
@pytest.mark.parametrize("l1,l2", [(15, 20), (80, 50), (10, 1.5)])
def test_pixel_oracle_matches_closed_form(i1, i2, l1, l2):
    sol = pixel_oracle(i1, i2, LossWeights(l1, l2))
    eb1, eb2 = closed_form_b(i1, i2, l1, l2)
    assert sol.b1 == pytest.approx(eb1, abs=2 / 255)
    assert sol.b2 == pytest.approx(eb2, abs=2 / 255)
    assert sol.energy <= brute_force(i1, i2, l1, l2) + 1e-9


def test_pixel_oracle_examples():
    sol = pixel_oracle(0.8, 0.5, LossWeights(15, 20))
    assert (sol.b1, sol.b2) == pytest.approx((0.8, 0.5), abs=1 / 255)
    assert sol.energy == pytest.approx(1.3125, abs=1e-3)
    sol = pixel_oracle(0.4, 0.4, LossWeights(15, 20))
    assert sol.energy == pytest.approx(0.0, abs=1e-9)


def test_zero_floor_weight_is_degenerate():
    sol = pixel_oracle(0.7, 0.3, LossWeights(15, 0))
    assert sol.energy == pytest.approx(0.0, abs=1e-6)
    assert max(sol.b1, sol.b2) <= 0.3 + 1e-6
    # the all-black background is one member of the zero-energy family
    assert pixel_energy(0.0, 0.0, 0.7, 0.3, 0.7, 0.3, 15, 0) == 0.0


def test_pixel_oracle_validation():
    with pytest.raises(ValueError):
        pixel_oracle(1.2, 0.5)
    with pytest.raises(ValueError):
        pixel_oracle(0.2, 0.5, grid_step=0.1)


def test_solve_images_agrees_with_pixel_oracle():
    rng = np.random.default_rng(1)
    i1, i2 = rng.integers(0, 256, size=(2, 3, 3, 3)) / 255
    sol = solve_images(i1, i2, LossWeights(80, 50))
    for idx in [(0, 0, 0), (1, 2, 1), (2, 1, 2)]:
        p = pixel_oracle(i1[idx], i2[idx], LossWeights(80, 50))
        assert sol.b1[idx] == pytest.approx(p.b1, abs=1e-9)
        assert sol.pixel_energy[idx] == pytest.approx(p.energy, abs=1e-9)
    assert sol.energy == pytest.approx(sol.pixel_energy.mean())


def test_toy_geometry():
    i1, i2, gt = toy_images(32)
    assert i1.shape == (32, 32, 3)
    assert set(np.unique(gt)) == {0.0, 0.6}
    # the two reflections do not overlap each other
    assert not ((i1 != gt) & (i2 != gt)).any()
    assert ((i1 != gt).any(axis=2)).sum() > 20
    np.testing.assert_array_equal(np.minimum(i1, i2), gt)
    with pytest.raises(ValueError):
        toy_images(16)


def test_image_oracle_on_toy():
    i1, i2, gt = toy_images(32)
    b, energy = image_oracle(i1, i2, LossWeights(80, 50))
    same = (i1 == i2)
    np.testing.assert_allclose(b[same], gt[same], atol=1e-9)
    ghost = i1 > i2
    np.testing.assert_allclose(b[ghost], i2[ghost] + 0.2, atol=1 / 255)
    assert energy > 0


@pytest.fixture(scope="module")
def perturbed_net():
    net = build_network(seed=0).eval()
    with torch.no_grad():
        net.get_code("background").shift[:8] = -50.0
        net.get_code("reflection").shift[8:16] = -50.0
    return net


def test_active_channels_detects_dead_features(perturbed_net):
    rng = np.random.default_rng(0)
    probes = [rng.uniform(size=(16, 16, 3)) for _ in range(2)]
    report = active_channels(perturbed_net, probes, effective_threshold=1e-3)
    assert report.background_mse.shape == (64,)
    # a feature held far below zero is removed by the ReLU, so zeroing it is a no-op
    assert not report.active_background & set(range(8))
    assert not report.active_reflection & set(range(8, 16))
    assert report.shared_active <= 64 - 16
    d = report.to_dict()
    assert d["shared_active"] == report.shared_active


def test_active_channels_requires_latent_variant():
    net = build_network(NetConfig(variant="six_channel"))
    with pytest.raises(ConfigError):
        active_channels(net, [np.zeros((16, 16, 3))])
    with pytest.raises(ValueError):
        active_channels(build_network(), [])


def test_feature_grid(perturbed_net):
    img = np.random.default_rng(2).uniform(size=(12, 10, 3))
    grid = feature_grid(perturbed_net, img, perturbed_net.get_code("background"))
    assert grid.shape == (96, 80, 3)
    assert grid.min() >= 0 and grid.max() <= 1
    assert np.array_equal(grid[..., 0], grid[..., 2])
