"""Layers with explicit forward/backward passes on float64 numpy arrays.

Every layer exposes ``params`` and ``grads`` (dicts of arrays keyed by the
same names), ``weight_names`` (the subset that counts as weight matrices for
regularization and parameter counting), ``forward(x, train)`` and
``backward(dy)``. ``backward`` must follow the matching ``forward``.
"""
import numpy as np

from fcdcast import kernels
from fcdcast.data import StructuralError, ValidationError


class Layer:
    weight_names = ()

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def buffers(self):
        """Non-trainable state saved with checkpoints."""
        return {}

    def load_buffers(self, state):
        pass


class Dense(Layer):
    """Weight averaging without bias: ``y = x @ theta`` over the last axis."""

    weight_names = ("theta",)

    def __init__(self, theta):
        super().__init__()
        self.params["theta"] = np.asarray(theta, dtype=np.float64)
        self.zero_grad()

    @property
    def shape(self):
        return self.params["theta"].shape

    def forward(self, x, train=False):
        f_in = self.params["theta"].shape[0]
        if x.shape[-1] != f_in:
            raise StructuralError(f"dense expects {f_in} features, got {x.shape[-1]}")
        self._x = x
        return x @ self.params["theta"]

    def backward(self, dy):
        theta = self.params["theta"]
        x2 = self._x.reshape(-1, theta.shape[0])
        self.grads["theta"] = x2.T @ dy.reshape(-1, theta.shape[1])
        return dy @ theta.T


def conv_output_size(n, r, stride, pad):
    span = n + 2 * pad - r
    if span < 0 or span % stride:
        raise StructuralError(f"conv: ({n} + 2*{pad} - {r}) not divisible by stride {stride}")
    return span // stride + 1


def pool_output_size(n, r, stride):
    span = n - r
    if span < 0 or span % stride:
        raise StructuralError(f"pool: ({n} - {r}) not divisible by stride {stride}")
    return span // stride + 1


class Conv2D(Layer):
    """Cross-correlation without bias on (B, C, H, W) inputs.

    ``theta`` has shape (F_out, F_in, R, R).
    """

    weight_names = ("theta",)

    def __init__(self, theta, stride=1, pad=0):
        super().__init__()
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 4 or theta.shape[2] != theta.shape[3]:
            raise StructuralError("conv kernel must be (F_out, F_in, R, R)")
        self.params["theta"] = theta
        self.stride = stride
        self.pad = pad
        self.zero_grad()

    def output_shape(self, in_shape):
        c, h, w = in_shape
        f_out, f_in, r, _ = self.params["theta"].shape
        if c != f_in:
            raise StructuralError(f"conv expects {f_in} channels, got {c}")
        return (f_out, conv_output_size(h, r, self.stride, self.pad),
                conv_output_size(w, r, self.stride, self.pad))

    def forward(self, x, train=False):
        theta = self.params["theta"]
        f_out, _, r, _ = theta.shape
        _, oh, ow = self.output_shape(x.shape[1:])
        b = x.shape[0]
        self._x_shape = x.shape
        self._cols = kernels.im2col(x, r, self.stride, self.pad)
        out = self._cols @ theta.reshape(f_out, -1).T
        return np.ascontiguousarray(out.reshape(b, oh, ow, f_out).transpose(0, 3, 1, 2))

    def backward(self, dy):
        theta = self.params["theta"]
        f_out, _, r, _ = theta.shape
        d2 = dy.transpose(0, 2, 3, 1).reshape(-1, f_out)
        self.grads["theta"] = (d2.T @ self._cols).reshape(theta.shape)
        dcols = d2 @ theta.reshape(f_out, -1)
        return kernels.col2im(dcols, self._x_shape, r, self.stride, self.pad)


class MaxPool2D(Layer):
    def __init__(self, r=2, stride=2):
        super().__init__()
        self.r = r
        self.stride = stride

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, pool_output_size(h, self.r, self.stride), pool_output_size(w, self.r, self.stride))

    def forward(self, x, train=False):
        self.output_shape(x.shape[1:])
        self._x_shape = x.shape
        out, self._argmax = kernels.maxpool_forward(x, self.r, self.stride)
        return out

    def backward(self, dy):
        return kernels.maxpool_backward(dy, self._argmax, self._x_shape)


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class LeakyReLU(Layer):
    def __init__(self, slope=0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False):
        self._pos = x >= 0
        return np.where(self._pos, x, self.slope * x)

    def backward(self, dy):
        return np.where(self._pos, dy, self.slope * dy)


class ELU(Layer):
    def __init__(self, alpha=1.0):
        super().__init__()
        self.alpha = alpha

    def forward(self, x, train=False):
        self._x = x
        return np.where(x >= 0, x, self.alpha * np.expm1(np.minimum(x, 0)))

    def backward(self, dy):
        x = self._x
        return np.where(x >= 0, dy, dy * self.alpha * np.exp(np.minimum(x, 0)))


def leaky_relu(x, slope=0.01):
    return np.maximum(x, slope * x) if slope <= 1 else np.minimum(x, slope * x)


def leaky_relu_grad(x, slope=0.01):
    return np.where(x >= 0, 1.0, slope)


def output_clamp(x):
    return np.clip(x, 0.0, 1.0)


def output_clamp_grad(x):
    """Subgradient: 1 on the closed interval [0, 1], 0 outside."""
    return ((x >= 0.0) & (x <= 1.0)).astype(np.float64)


def output_clamp_revive_grad(x, dy):
    """Training surrogate for the clamp backward.

    Identical to the subgradient on [0, 1]. Outside it, the upstream gradient
    is kept only where a descent step (x -= lr * dy) moves x back toward the
    interval, so a unit stuck below 0 or above 1 can recover instead of
    receiving no signal at all. Gradients that would push it further out
    are still dropped.
    """
    inside = (x >= 0.0) & (x <= 1.0)
    back = ((x < 0.0) & (dy < 0.0)) | ((x > 1.0) & (dy > 0.0))
    return np.where(inside | back, dy, 0.0)


CLAMP_GRADS = ("subgradient", "revive")


class OutputClamp(Layer):
    """Clip to [0, 1]. ``grad="subgradient"`` (default) backpropagates the
    exact subgradient; ``grad="revive"`` uses :func:`output_clamp_revive_grad`.
    """

    def __init__(self, grad="subgradient"):
        super().__init__()
        if grad not in CLAMP_GRADS:
            raise ValueError(f"clamp grad must be one of {CLAMP_GRADS}, got {grad!r}")
        self.grad = grad

    def forward(self, x, train=False):
        self._x = x
        return output_clamp(x)

    def backward(self, dy):
        if self.grad == "revive":
            return output_clamp_revive_grad(self._x, dy)
        return dy * output_clamp_grad(self._x)


class BatchNorm(Layer):
    """Per-feature batch normalization with learned scale and shift.

    Features live on axis 1 for 4-d inputs (channels) and on the last axis
    otherwise; every other axis is reduced. Running statistics follow the
    epoch-weighted running average ``E_{e+1} = (e E_e + mean) / (e + 1)``
    (same for the biased batch variance) unless ``momentum`` is given, in
    which case an exponential moving average is used. At inference the
    stored variance is rescaled by ``m / (m - 1)`` where ``m`` is the number
    of values reduced per feature in training.
    """

    def __init__(self, n_features, eps=1e-8, momentum=None):
        super().__init__()
        self.params["gamma"] = np.ones(n_features)
        self.params["beta"] = np.zeros(n_features)
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self.epoch = 0
        self.batch_count = 0
        self.eps = eps
        self.momentum = momentum
        self.update_stats = True
        self.zero_grad()

    def _to_2d(self, x):
        if x.ndim == 4:
            return x.transpose(0, 2, 3, 1).reshape(-1, x.shape[1])
        return x.reshape(-1, x.shape[-1])

    def _from_2d(self, y, shape):
        if len(shape) == 4:
            b, c, h, w = shape
            return np.ascontiguousarray(y.reshape(b, h, w, c).transpose(0, 3, 1, 2))
        return y.reshape(shape)

    def inference_var(self):
        m = self.batch_count
        return self.running_var * (m / (m - 1)) if m > 1 else self.running_var

    def forward(self, x, train=False):
        shape = x.shape
        x2 = self._to_2d(x)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if gamma.shape[0] != x2.shape[1]:
            raise StructuralError(f"batchnorm has {gamma.shape[0]} features, got {x2.shape[1]}")
        if train:
            m = x2.shape[0]
            if m < 2:
                raise ValidationError("batch normalization in training needs at least 2 values per feature")
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)
            if self.update_stats:
                self._update_running(mean, var, m)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x2 - mean) * inv_std
            self._cache = (xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.inference_var() + self.eps)
            xhat = (x2 - self.running_mean) * inv_std
            self._cache = None
            self._infer_cache = (xhat, inv_std)
        return self._from_2d(gamma * xhat + beta, shape)

    def _update_running(self, mean, var, m):
        if self.momentum is None:
            e = self.epoch
            self.running_mean = (e * self.running_mean + mean) / (e + 1)
            self.running_var = (e * self.running_var + var) / (e + 1)
        elif self.epoch == 0:
            self.running_mean = mean.copy()
            self.running_var = var.copy()
        else:
            mom = self.momentum
            self.running_mean = (1 - mom) * self.running_mean + mom * mean
            self.running_var = (1 - mom) * self.running_var + mom * var
        self.epoch += 1
        self.batch_count = m

    def backward(self, dy):
        shape = dy.shape
        dy2 = self._to_2d(dy)
        gamma = self.params["gamma"]
        if self._cache is None:
            xhat, inv_std = self._infer_cache
            self.grads["gamma"] = (dy2 * xhat).sum(axis=0)
            self.grads["beta"] = dy2.sum(axis=0)
            return self._from_2d(dy2 * gamma * inv_std, shape)
        xhat, inv_std = self._cache
        m = dy2.shape[0]
        self.grads["gamma"] = (dy2 * xhat).sum(axis=0)
        self.grads["beta"] = dy2.sum(axis=0)
        dxhat = dy2 * gamma
        dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return self._from_2d(dx, shape)

    def buffers(self):
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "epoch": np.array([self.epoch], dtype=np.float64),
            "batch_count": np.array([self.batch_count], dtype=np.float64),
        }

    def load_buffers(self, state):
        self.running_mean = np.array(state["running_mean"], dtype=np.float64)
        self.running_var = np.array(state["running_var"], dtype=np.float64)
        self.epoch = int(state["epoch"][0])
        self.batch_count = int(state["batch_count"][0])


class Sequential:
    """Named stack of layers; the parameter store the trainer updates."""

    def __init__(self, layers, config=None):
        self.layers = list(layers)
        self.config = dict(config or {})

    def named_layers(self):
        return [(f"{i}.{type(layer).__name__.lower()}", layer) for i, layer in enumerate(self.layers)]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def predict(self, x):
        return self.forward(x, train=False)

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self):
        """(name, layer, key) for every trainable array, in a fixed order."""
        out = []
        for lname, layer in self.named_layers():
            for key in layer.params:
                out.append((f"{lname}.{key}", layer, key))
        return out

    def weights(self):
        """Weight matrices only (regularized and counted), in a fixed order."""
        return [(n, layer.params[k]) for n, layer, k in self.parameters() if k in layer.weight_names]

    def weight_grads(self):
        return [layer.grads[k] for _, layer, k in self.parameters() if k in layer.weight_names]

    def batchnorms(self):
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def state_dict(self):
        state = {}
        for lname, layer in self.named_layers():
            for k, v in layer.params.items():
                state[f"{lname}.{k}"] = v
            for k, v in layer.buffers().items():
                state[f"{lname}.{k}"] = v
        return state

    def load_state_dict(self, state):
        for lname, layer in self.named_layers():
            for k in layer.params:
                arr = np.asarray(state[f"{lname}.{k}"], dtype=np.float64)
                if arr.shape != layer.params[k].shape:
                    raise StructuralError(f"{lname}.{k}: shape {arr.shape} != {layer.params[k].shape}")
                layer.params[k] = arr.copy()
            bufs = layer.buffers()
            if bufs:
                layer.load_buffers({k: state[f"{lname}.{k}"] for k in bufs})
