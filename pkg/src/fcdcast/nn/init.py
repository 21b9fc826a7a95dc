import numpy as np


def init_glorot(shape, rng, fan_in=None, fan_out=None):
    """Gaussian weights scaled by ``sqrt(6 / (fan_in + fan_out))``.

    For a 2-d shape the fans are the two extents; conv kernels
    (F_out, F_in, R, R) use ``F_in*R*R`` and ``F_out*R*R``.
    """
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"extents must be positive, got {shape}")
    if fan_in is None or fan_out is None:
        if len(shape) == 4:
            rf = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * rf, shape[0] * rf
        else:
            fan_in, fan_out = shape[0], shape[-1]
    return np.sqrt(6.0 / (fan_in + fan_out)) * rng.standard_normal(shape)


def init_lstm_diagonal(f_h, rng, eps=1e-2):
    """``0.5 * I`` plus dense Gaussian noise of standard deviation ``eps``."""
    if f_h <= 0:
        raise ValueError("hidden size must be positive")
    w = 0.5 * np.eye(f_h)
    if eps:
        w = w + eps * rng.standard_normal((f_h, f_h))
    return w
