"""Central finite differences against analytic backpropagation."""
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from fcdcast.nn.losses import elastic_net_grad, elastic_net_penalty, quadratic_loss

MAX_CHECKED_PARAMS = 1000
# gradients below this magnitude are compared on an absolute scale
REL_ERROR_FLOOR = 1e-6


class GradientCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    n_checked: int = 0
    input_rel_error: float = float("nan")

    def passed(self, tol):
        return self.max_rel_error < tol


def relative_error(analytic, numeric, floor=REL_ERROR_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


@contextmanager
def frozen_batchnorm_stats(model):
    bns = model.batchnorms()
    saved = [bn.update_stats for bn in bns]
    for bn in bns:
        bn.update_stats = False
    try:
        yield
    finally:
        for bn, s in zip(bns, saved):
            bn.update_stats = s


@contextmanager
def exact_clamp_gradients(model):
    """Switch every output clamp to its exact subgradient; the training
    surrogate is not the derivative of the loss outside [0, 1]."""
    from fcdcast.nn.layers import OutputClamp

    clamps = [l for l in getattr(model, "layers", ()) if isinstance(l, OutputClamp)]
    saved = [c.grad for c in clamps]
    for c in clamps:
        c.grad = "subgradient"
    try:
        yield
    finally:
        for c, g in zip(clamps, saved):
            c.grad = g


def objective(model, x, y, l1=0.0, l2=0.0):
    loss, _ = quadratic_loss(model.forward(x, train=True), y)
    return loss + elastic_net_penalty([w for _, w in model.weights()], l1, l2)


def analytic_gradients(model, x, y, l1=0.0, l2=0.0):
    """Gradients of the regularized loss: ({param name: grad}, d loss / d x)."""
    model.zero_grad()
    pred = model.forward(x, train=True)
    _, dpred = quadratic_loss(pred, y)
    dx = model.backward(dpred)
    grads = {}
    for name, layer, key in model.parameters():
        g = layer.grads[key].copy()
        if key in layer.weight_names:
            g += elastic_net_grad(layer.params[key], l1, l2)
        grads[name] = g
    return grads, dx


def gradient_check(model, x, y, l1=0.0, l2=0.0, step=1e-5, check_input=True):
    """Compare analytic and central-difference gradients of the mini-batch
    loss for every parameter entry (and optionally the input).

    Batch-norm running statistics are frozen and output clamps use their
    exact subgradient for the duration. Raises
    :class:`GradientCheckError` when the loss is not finite.
    """
    n_params = sum(layer.params[k].size for _, layer, k in model.parameters())
    if n_params > MAX_CHECKED_PARAMS:
        raise GradientCheckError(f"model has {n_params} parameters; gradient check is limited to "
                                 f"{MAX_CHECKED_PARAMS}")
    x = np.array(x, dtype=np.float64)
    with frozen_batchnorm_stats(model), exact_clamp_gradients(model):
        base = objective(model, x, y, l1, l2)
        if not np.isfinite(base):
            raise GradientCheckError(f"non-finite loss {base}")
        grads, dx = analytic_gradients(model, x, y, l1, l2)
        report = GradCheckReport(max_rel_error=0.0)
        for name, layer, key in model.parameters():
            p = layer.params[key]
            numeric = np.empty_like(p)
            flat = p.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = objective(model, x, y, l1, l2)
                flat[i] = orig - step
                fm = objective(model, x, y, l1, l2)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradientCheckError(f"non-finite loss while perturbing {name}[{i}]")
                nflat[i] = (fp - fm) / (2 * step)
            err = float(relative_error(grads[name], numeric).max()) if p.size else 0.0
            report.per_param[name] = err
            report.max_rel_error = max(report.max_rel_error, err)
            report.n_checked += p.size
        if check_input:
            numeric = np.empty_like(x)
            xf = x.reshape(-1)
            nf = numeric.reshape(-1)
            for i in range(xf.size):
                orig = xf[i]
                xf[i] = orig + step
                fp = objective(model, x, y, l1, l2)
                xf[i] = orig - step
                fm = objective(model, x, y, l1, l2)
                xf[i] = orig
                nf[i] = (fp - fm) / (2 * step)
            report.input_rel_error = float(relative_error(dx, numeric).max())
            report.max_rel_error = max(report.max_rel_error, report.input_rel_error)
    return report
