import numpy as np


def quadratic_loss(pred, target):
    """Mini-batch loss ``sum((pred - target)**2) / (2 * batch)`` and its
    gradient with respect to ``pred``. Axis 0 is the batch axis."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    t_mb = pred.shape[0] if pred.ndim else 1
    diff = pred - target
    return float(np.sum(diff * diff) / (2.0 * t_mb)), diff / t_mb


def elastic_net_penalty(weights, l1, l2):
    """``(l2 / 2) * sum(theta**2) + l1 * sum(|theta|)`` over all weight arrays."""
    total = 0.0
    for w in weights:
        if l2:
            total += 0.5 * l2 * float(np.sum(w * w))
        if l1:
            total += l1 * float(np.sum(np.abs(w)))
    return total


def elastic_net_grad(w, l1, l2):
    """``l2 * theta + l1 * sign(theta)``; the l1 subgradient at 0 is 0."""
    return l2 * w + l1 * np.sign(w)
