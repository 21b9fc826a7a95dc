"""LSTM without peepholes, unrolled over the temporal axis."""
import numpy as np

from fcdcast.data import StructuralError
from fcdcast.nn.layers import Layer, Sequential

GATES = ("i", "f", "o", "g")


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class LSTM(Layer):
    """One spatial hidden layer of LSTM cells over inputs (B, T, F_in).

    Gate pre-activations are ``x_t @ Wx_k + h_{t-1} @ Wh_k`` for
    k in (i, f, o, g); state before the first step is zero. No biases.
    Output is the hidden sequence (B, T, F_H).
    """

    weight_names = tuple(f"Wx_{k}" for k in GATES) + tuple(f"Wh_{k}" for k in GATES)

    def __init__(self, wx, wh):
        super().__init__()
        for k in GATES:
            self.params[f"Wx_{k}"] = np.asarray(wx[k], dtype=np.float64)
            self.params[f"Wh_{k}"] = np.asarray(wh[k], dtype=np.float64)
        f_in, f_h = self.params["Wx_i"].shape
        for k in GATES:
            if self.params[f"Wx_{k}"].shape != (f_in, f_h) or self.params[f"Wh_{k}"].shape != (f_h, f_h):
                raise StructuralError("inconsistent LSTM weight shapes")
        self.zero_grad()

    @property
    def sizes(self):
        return self.params["Wx_i"].shape

    def _stacked(self):
        wx = np.concatenate([self.params[f"Wx_{k}"] for k in GATES], axis=1)
        wh = np.concatenate([self.params[f"Wh_{k}"] for k in GATES], axis=1)
        return wx, wh

    def step(self, x_t, h_prev, c_prev, wx=None, wh=None):
        """One temporal step. Returns (h, c, cache)."""
        if wx is None:
            wx, wh = self._stacked()
        f_h = wh.shape[0]
        z = x_t @ wx + h_prev @ wh
        i = sigmoid(z[:, :f_h])
        f = sigmoid(z[:, f_h:2 * f_h])
        o = sigmoid(z[:, 2 * f_h:3 * f_h])
        g = np.tanh(z[:, 3 * f_h:])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        return h, c, (x_t, h_prev, c_prev, i, f, o, g, tc)

    def forward(self, x, train=False):
        f_in, f_h = self.sizes
        if x.ndim != 3 or x.shape[2] != f_in:
            raise StructuralError(f"LSTM expects (B, T, {f_in}) input, got {x.shape}")
        b, t_steps, _ = x.shape
        wx, wh = self._stacked()
        h = np.zeros((b, f_h))
        c = np.zeros((b, f_h))
        out = np.empty((b, t_steps, f_h))
        self._caches = []
        for t in range(t_steps):
            h, c, cache = self.step(x[:, t], h, c, wx, wh)
            self._caches.append(cache)
            out[:, t] = h
        return out

    def backward(self, dy):
        f_in, f_h = self.sizes
        wx, wh = self._stacked()
        b, t_steps, _ = dy.shape
        dwx = np.zeros_like(wx)
        dwh = np.zeros_like(wh)
        dx = np.empty((b, t_steps, f_in))
        dh_next = np.zeros((b, f_h))
        dc_next = np.zeros((b, f_h))
        for t in reversed(range(t_steps)):
            x_t, h_prev, c_prev, i, f, o, g, tc = self._caches[t]
            dh = dy[:, t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                do * o * (1.0 - o),
                dg * (1.0 - g * g),
            ], axis=1)
            dwx += x_t.T @ dz
            dwh += h_prev.T @ dz
            dx[:, t] = dz @ wx.T
            dh_next = dz @ wh.T
            dc_next = dc * f
        for n, k in enumerate(GATES):
            self.grads[f"Wx_{k}"] = dwx[:, n * f_h:(n + 1) * f_h].copy()
            self.grads[f"Wh_{k}"] = dwh[:, n * f_h:(n + 1) * f_h].copy()
        return dx


def lstm_step(x_t, h_prev, c_prev, wx, wh):
    """Functional single step with per-gate weight dicts. Returns (h, c, gates)."""
    cell = LSTM(wx, wh)
    h, c, cache = cell.step(np.atleast_2d(x_t), np.atleast_2d(h_prev), np.atleast_2d(c_prev))
    _, _, _, i, f, o, g, _ = cache
    return h, c, {"i": i, "f": f, "o": o, "g": g}


class RecurrentModel(Sequential):
    """Layer stack containing one :class:`LSTM`; every other layer acts
    pointwise in time.

    ``forward`` consumes whole (teacher-forced) sequences. ``predict`` runs
    step by step, and when a feedback map is attached it overwrites the
    inputs that refer to not-yet-observed slots with the model's own earlier
    outputs.
    """

    def __init__(self, layers, config=None, feedback_map=None):
        super().__init__(layers, config)
        self.feedback_map = feedback_map
        lstms = [layer for layer in self.layers if isinstance(layer, LSTM)]
        if len(lstms) != 1:
            raise StructuralError("recurrent model needs exactly one LSTM layer")

    def predict(self, x):
        if self.feedback_map is None:
            return self.forward(x, train=False)
        from fcdcast.featurize import apply_feedback

        b, t_steps, _ = x.shape
        outputs = None
        state = {}
        for tau in range(t_steps):
            z = apply_feedback(x[:, tau], tau, outputs, self.feedback_map) if outputs is not None else x[:, tau]
            for idx, layer in enumerate(self.layers):
                if isinstance(layer, LSTM):
                    f_h = layer.sizes[1]
                    h_prev, c_prev = state.get(idx, (np.zeros((b, f_h)), np.zeros((b, f_h))))
                    h, c, _ = layer.step(z, h_prev, c_prev)
                    state[idx] = (h, c)
                    z = h
                else:
                    z = layer.forward(z, train=False)
            if outputs is None:
                outputs = np.zeros((b, t_steps, z.shape[-1]))
            outputs[:, tau] = z
        return outputs
