"""Full and reduced network inputs built from a :class:`SpeedPanel`.

Flat input layout (fixed so FNN weights stay interpretable):

* full: current-day block of shape (n0, bf) with column ``b - 1`` holding the
  speed at ``T - b`` (most recent first), then one block of shape
  (n0, p1f + p2f + 1) per past day ``delta = 1..df`` with column ``p + p1f``
  holding the speed at ``T - delta*D + p``. Each block is flattened
  edge-major.
* reduced: ``br`` recent speeds (most recent first), then for each past day
  the ``p1r + p2r + 1`` averages of ``m`` consecutive slots starting at
  ``T - delta*D + m*p``.

Targets are (n_out_edges, horizon) matrices of the speeds at ``T + h``.
The edge axis is treated as a ring: edge ``N + l`` wraps modulo the number
of edges.
"""
import struct
from dataclasses import dataclass

import numpy as np

from fcdcast import kernels
from fcdcast.data import SpeedPanel, StructuralError, ValidationError

SAMPLES_MAGIC = b"FCS1"


class SampleUnavailable(LookupError):
    """A requested sample touches an invalid or out-of-range slot."""


@dataclass(frozen=True)
class FullInputSpec:
    n0: int = 32
    bf: int = 32
    df: int = 7
    p1f: int = 15
    p2f: int = 16
    hf: int = 20

    mode = "full"

    @property
    def window(self):
        return self.p1f + self.p2f + 1

    @property
    def input_size(self):
        return self.n0 * (self.bf + self.window * self.df)

    @property
    def output_size(self):
        return self.n0 * self.hf

    @property
    def n_out_edges(self):
        return self.n0

    @property
    def horizon(self):
        return self.hf

    @property
    def lookback(self):
        return self.bf

    def past_windows(self, day):
        """(offset, length) of each past-day window relative to the anchor."""
        return [(-d * day - self.p1f, self.window) for d in range(1, self.df + 1)]


@dataclass(frozen=True)
class ReducedInputSpec:
    br: int = 4
    dr: int = 7
    p1r: int = 0
    p2r: int = 3
    m: int = 5
    hr: int = 20

    mode = "reduced"

    @property
    def n_avg(self):
        return self.p1r + self.p2r + 1

    @property
    def input_size(self):
        return self.br + self.n_avg * self.dr

    @property
    def output_size(self):
        return self.hr

    @property
    def n_out_edges(self):
        return 1

    @property
    def horizon(self):
        return self.hr

    @property
    def lookback(self):
        return self.br

    def past_windows(self, day):
        return [(-d * day - self.m * self.p1r, self.m * self.n_avg) for d in range(1, self.dr + 1)]


def spec_for_mode(mode):
    if mode == "full":
        return FullInputSpec()
    if mode == "reduced":
        return ReducedInputSpec()
    raise ValidationError(f"unknown input mode {mode!r}")


@dataclass(frozen=True, eq=False)
class Sample:
    anchor_edge: int
    anchor_slot: int
    input: np.ndarray
    target: np.ndarray


def _windows(spec, day, lstm_steps=0):
    """All (offset, length) windows an anchor needs, relative to the anchor."""
    extra = max(lstm_steps - 1, 0)
    span = max(spec.horizon, lstm_steps)
    wins = [(-spec.lookback, spec.lookback + span)]
    wins += [(off, length + extra) for off, length in spec.past_windows(day)]
    return wins


def _edge_rows(spec, n_edges):
    """Rows read per anchor edge (before adding the anchor index)."""
    return np.arange(spec.n_out_edges)


def _check_n0(spec, panel):
    if spec.n_out_edges > panel.n_edges:
        raise StructuralError(f"spec needs {spec.n_out_edges} edges, panel has {panel.n_edges}")


def anchors_valid(panel: SpeedPanel, spec, anchors, lstm_steps=0):
    """Boolean per anchor: every slot the sample reads is in range and valid."""
    _check_n0(spec, panel)
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    L, S = panel.values.shape
    inv_cs = np.zeros((L, S + 1), dtype=np.int64)
    np.cumsum(~panel.valid, axis=1, out=inv_cs[:, 1:])
    ok = np.ones(len(anchors), dtype=bool)
    local = anchors[:, 1] - panel.slot_offset
    for off, length in _windows(spec, panel.slots_per_day, lstm_steps):
        lo = local + off
        hi = lo + length
        inside = (lo >= 0) & (hi <= S)
        ok &= inside
        lo_c = np.clip(lo, 0, S)
        hi_c = np.clip(hi, 0, S)
        for l in _edge_rows(spec, L):
            rows = (anchors[:, 0] + l) % L
            ok &= (inv_cs[rows, hi_c] - inv_cs[rows, lo_c]) == 0
    return ok


def enumerate_samples(panel: SpeedPanel, spec, stride=1, anchor_range=None, lstm_steps=0, edges=None):
    """Anchors (edge, slot) of every fully valid sample on the stride grid.

    Slots are visited on the absolute grid ``slot % stride == 0``; order is
    edge-major, then slot. With ``anchor_range=(lo, hi)`` only anchors whose
    target slots all fall in [lo, hi) are kept; input history may precede
    ``lo``.
    """
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    _check_n0(spec, panel)
    lo = panel.slot_offset
    hi = panel.slot_offset + panel.n_slots
    span = max(spec.horizon, lstm_steps)
    if anchor_range is not None:
        lo = max(lo, anchor_range[0])
        hi = min(hi, anchor_range[1])
    first = -(-lo // stride) * stride
    slots = np.arange(first, hi - span + 1, stride, dtype=np.int64)
    edge_ids = np.arange(panel.n_edges) if edges is None else np.asarray(edges, dtype=np.int64)
    if slots.size == 0 or edge_ids.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    grid = np.stack(np.broadcast_arrays(edge_ids[:, None], slots[None, :]), axis=-1).reshape(-1, 2)
    return grid[anchors_valid(panel, spec, grid, lstm_steps)]


def _gather(panel, rows, starts, width):
    local = np.asarray(starts, dtype=np.int64) - panel.slot_offset
    return kernels.gather_rows(panel.values, rows, local, width)


def build_batch(panel: SpeedPanel, spec, anchors, check=True):
    """Stack inputs (n, input_size) and targets (n, n_out_edges, horizon)."""
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    if check:
        ok = anchors_valid(panel, spec, anchors)
        if not ok.all():
            bad = anchors[~ok][0]
            raise SampleUnavailable(f"sample at edge {bad[0]}, slot {bad[1]} touches invalid data")
    n = len(anchors)
    L = panel.n_edges
    D = panel.slots_per_day
    T = anchors[:, 1]
    n_out = spec.n_out_edges
    # rows/anchors repeated per sample edge, edge-minor
    rows = ((anchors[:, 0:1] + np.arange(n_out)[None, :]) % L).reshape(-1)
    T_rep = np.repeat(T, n_out)
    blocks = []
    cur = _gather(panel, rows, T_rep - spec.lookback, spec.lookback)[:, ::-1]
    blocks.append(cur.reshape(n, n_out * spec.lookback))
    for off, length in spec.past_windows(D):
        w = _gather(panel, rows, T_rep + off, length)
        if spec.mode == "reduced":
            w = w.reshape(-1, spec.n_avg, spec.m).sum(axis=2) / spec.m
        blocks.append(w.reshape(n, -1))
    X = np.ascontiguousarray(np.concatenate(blocks, axis=1))
    Y = _gather(panel, rows, T_rep, spec.horizon).reshape(n, n_out, spec.horizon)
    return X, Y


def build_full_sample(panel, spec: FullInputSpec, edge, slot):
    X, Y = build_batch(panel, spec, [(edge, slot)])
    return Sample(int(edge), int(slot), X[0], Y[0])


def build_reduced_sample(panel, spec: ReducedInputSpec, edge, slot):
    X, Y = build_batch(panel, spec, [(edge, slot)])
    return Sample(int(edge), int(slot), X[0], Y[0])


def to_cnn_batch(X, spec: FullInputSpec):
    """Reshape flat full inputs (n, F0) into (n, df + 1, n0, bf) feature maps,
    each row ordered oldest to newest along the width."""
    if spec.mode != "full":
        raise StructuralError("CNN input requires the full input spec")
    if spec.bf != spec.window:
        raise StructuralError(f"bf={spec.bf} must equal p1f+p2f+1={spec.window} for image input")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    cur_size = spec.n0 * spec.bf
    cur = X[:, :cur_size].reshape(n, 1, spec.n0, spec.bf)[..., ::-1]
    past = X[:, cur_size:].reshape(n, spec.df, spec.n0, spec.window)
    return np.ascontiguousarray(np.concatenate([cur, past], axis=1))


def to_cnn_tensor(sample: Sample, spec: FullInputSpec):
    return to_cnn_batch(sample.input[None, :], spec)[0]


def lstm_feedback_map(spec, t_steps):
    """For each step tau and flat input position, the (step, output unit)
    whose prediction replaces it at inference, or -1 if the entry is known
    history. Only current-day entries with ``tau - b >= 0`` are fed back."""
    src_step = np.full((t_steps, spec.input_size), -1, dtype=np.int64)
    src_unit = np.full((t_steps, spec.input_size), -1, dtype=np.int64)
    n_out, lb = spec.n_out_edges, spec.lookback
    for tau in range(t_steps):
        for l in range(n_out):
            for b in range(1, lb + 1):
                if tau - b >= 0:
                    pos = l * lb + (b - 1)
                    src_step[tau, pos] = tau - b
                    src_unit[tau, pos] = l
    return src_step, src_unit


def lstm_batch(panel, spec, anchors, t_steps=20, check=True):
    """Teacher-forced sequences (n, t_steps, F0) and per-step targets
    (n, t_steps, n_out_edges): step tau is the static input anchored at
    ``T + tau`` with ground truth in every slot."""
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    if check:
        ok = anchors_valid(panel, spec, anchors, lstm_steps=t_steps)
        if not ok.all():
            bad = anchors[~ok][0]
            raise SampleUnavailable(f"sequence at edge {bad[0]}, slot {bad[1]} touches invalid data")
    n = len(anchors)
    xs, ys = [], []
    for tau in range(t_steps):
        shifted = anchors + np.array([0, tau])
        X, Y = build_batch(panel, spec, shifted, check=False)
        xs.append(X)
        ys.append(Y[:, :, 0])
    seq = np.stack(xs, axis=1) if xs else np.zeros((n, 0, spec.input_size))
    tgt = np.stack(ys, axis=1) if ys else np.zeros((n, 0, spec.n_out_edges))
    return seq, tgt


def apply_feedback(x_step, tau, outputs, fmap):
    """Overwrite fed-back positions of step ``tau`` inputs (n, F0) with
    earlier predictions ``outputs`` (n, steps_so_far, n_out)."""
    src_step, src_unit = fmap
    pos = np.nonzero(src_step[tau] >= 0)[0]
    if pos.size:
        x_step = x_step.copy()
        x_step[:, pos] = outputs[:, src_step[tau, pos], src_unit[tau, pos]]
    return x_step


def to_lstm_sequence(panel, spec, edge, slot, t_steps=20, predictions=None):
    """Sequence (t_steps, F0) and per-step targets (t_steps, n_out_edges).

    Without ``predictions`` the sequence is teacher-forced. With
    ``predictions`` of shape (t_steps, n_out_edges), current-day entries that
    refer to slots at or after the anchor are taken from it instead.
    """
    seq, tgt = lstm_batch(panel, spec, [(edge, slot)], t_steps)
    seq, tgt = seq[0], tgt[0]
    if predictions is not None:
        fmap = lstm_feedback_map(spec, t_steps)
        preds = np.asarray(predictions, dtype=np.float64)[None]
        seq = np.stack([apply_feedback(seq[tau][None], tau, preds, fmap)[0] for tau in range(t_steps)])
    return seq, tgt


# --- sample cache -------------------------------------------------------------

def write_samples(path, spec, anchors, X, Y):
    """``FCS1`` layout (little-endian): magic; u32 mode (0 full, 1 reduced);
    u32 n; u32 input_size; u32 n_out_edges; u32 horizon; n*2 i64 anchors
    (edge, slot); n*input_size f64 inputs; n*n_out*horizon f64 targets."""
    anchors = np.asarray(anchors, dtype="<i8").reshape(-1, 2)
    n = len(anchors)
    with open(path, "wb") as fh:
        fh.write(SAMPLES_MAGIC)
        fh.write(struct.pack("<IIIII", 0 if spec.mode == "full" else 1, n,
                             spec.input_size, spec.n_out_edges, spec.horizon))
        fh.write(anchors.tobytes())
        fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(Y, dtype="<f8").tobytes())


def read_samples(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != SAMPLES_MAGIC:
        raise StructuralError(f"{path}: not an FCS1 sample cache")
    mode, n, f0, n_out, h = struct.unpack_from("<IIIII", buf, 4)
    off = 24
    anchors = np.frombuffer(buf, "<i8", 2 * n, off).reshape(n, 2)
    off += 16 * n
    X = np.frombuffer(buf, "<f8", n * f0, off).reshape(n, f0)
    off += 8 * n * f0
    Y = np.frombuffer(buf, "<f8", n * n_out * h, off).reshape(n, n_out, h)
    return ("full" if mode == 0 else "reduced"), anchors.copy(), X.copy(), Y.copy()
