import math

import numpy as np


class Adam:
    """Adam with exponential learning-rate decay.

    By default the update is ``theta -= eta * m / sqrt(v + eps)`` with no
    bias correction of the moments; ``bias_correction=True`` gives the usual
    corrected variant ``eta * m_hat / (sqrt(v_hat) + eps)``. After every
    step ``eta`` is multiplied by ``exp(-alpha0)``.
    """

    def __init__(self, params, eta0=1e-3, alpha0=0.0, beta1=0.9, beta2=0.999, eps=1e-8,
                 bias_correction=False):
        self.params = list(params)
        self.eta = float(eta0)
        self.alpha0 = float(alpha0)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.bias_correction = bias_correction
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        """Update parameters in place from matching gradient arrays."""
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.bias_correction:
                m_hat = m / (1.0 - b1 ** self.t)
                v_hat = v / (1.0 - b2 ** self.t)
                p -= self.eta * m_hat / (np.sqrt(v_hat) + self.eps)
            else:
                p -= self.eta * m / np.sqrt(v + self.eps)
        self.eta *= math.exp(-self.alpha0)

    def state(self):
        return {"eta": self.eta, "t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state):
        self.eta = float(state["eta"])
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def adam_step(params, grads, state: Adam):
    """Functional spelling of :meth:`Adam.step` for callers holding state."""
    state.step(grads)
    return params
