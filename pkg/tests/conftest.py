import numpy as np
import pytest

from fcdcast.data import SpeedPanel, SyntheticConfig, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_panel():
    """10 days on 32 edges: enough history for full-input samples on day 8."""
    return generate_synthetic(SyntheticConfig(n_edges=32, n_days=10, rng_seed=5))


def ramp_panel(n_edges=4, n_days=9, spd=480):
    """values[l, s] = l + s / 1e5, so any gathered entry reveals its (edge, slot)."""
    s = np.arange(n_days * spd)
    values = np.arange(n_edges)[:, None] + s[None, :] / 1e5
    return SpeedPanel(values, np.ones(values.shape, bool), np.full(n_edges, 50.0), spd)


def decode(v):
    """Inverse of the ramp encoding: (edge, slot) arrays."""
    v = np.asarray(v)
    edge = np.floor(v + 1e-9).astype(int)
    slot = np.rint((v - edge) * 1e5).astype(int)
    return edge, slot


def overfit_toy_set(seed=0, n=10):
    """``n`` reduced-input samples drawn from a noise-free synthetic panel.

    Without observation noise every target lies in [0, 1], so the clamped
    output can represent them exactly and memorization is possible.
    """
    from fcdcast.data import mask_night_hours
    from fcdcast.featurize import ReducedInputSpec, build_batch, enumerate_samples

    panel = mask_night_hours(generate_synthetic(SyntheticConfig(32, 20, 0.6, 0.0, rng_seed=0)))
    spec = ReducedInputSpec()
    anchors = enumerate_samples(panel, spec, stride=7)
    pick = np.sort(np.random.default_rng(seed).choice(len(anchors), n, replace=False))
    X, Y = build_batch(panel, spec, anchors[pick])
    return X, Y.reshape(n, -1)


def full_batch_rmse(model, X, Y):
    """RMSE of the train-mode forward on the whole set, BN statistics frozen."""
    from fcdcast.nn.gradcheck import frozen_batchnorm_stats

    with frozen_batchnorm_stats(model):
        pred = model.forward(X, train=True)
    return float(np.sqrt(np.mean((pred - Y) ** 2)))
