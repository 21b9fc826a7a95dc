"""Speed panels: ingestion, free-flow normalization, night masking, splits,
synthetic seasonal traffic, and the ``FCD1`` binary cache."""
import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

SLOTS_PER_DAY = 480
SLOT_MINUTES = 3
PANEL_MAGIC = b"FCD1"


class ValidationError(ValueError):
    """Bad user-supplied values (non-positive speeds, bad fractions, ...)."""


class StructuralError(ValueError):
    """Inputs whose shape or indexing is inconsistent."""


class RawObservation(NamedTuple):
    edge_id: int
    slot: int
    speed_kph: float


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SpeedPanel:
    """Normalized speeds over (edge, slot) with a validity mask.

    ``values[l, s]`` is speed / free-flow speed. Entries where ``valid`` is
    False must never be read by featurization. Arrays are read-only.
    ``slot_offset`` is the absolute index of column 0, so that time-of-day
    arithmetic survives slicing.
    """

    values: np.ndarray
    valid: np.ndarray
    free_flow: np.ndarray
    slots_per_day: int = SLOTS_PER_DAY
    slot_offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        object.__setattr__(self, "valid", _frozen(self.valid, bool))
        object.__setattr__(self, "free_flow", _frozen(self.free_flow, np.float64))
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise StructuralError("values and valid must be matching 2-d arrays")
        if self.free_flow.shape != (self.values.shape[0],):
            raise StructuralError("free_flow must have one entry per edge")
        if self.slots_per_day <= 0:
            raise ValidationError("slots_per_day must be positive")
        v = self.values[self.valid]
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("valid entries must be finite and non-negative")

    @property
    def n_edges(self):
        return self.values.shape[0]

    @property
    def n_slots(self):
        return self.values.shape[1]

    @property
    def n_days(self):
        return self.n_slots // self.slots_per_day

    def slots(self, start, stop):
        """View restricted to absolute slot range [start, stop)."""
        lo, hi = start - self.slot_offset, stop - self.slot_offset
        if lo < 0 or hi > self.n_slots or lo > hi:
            raise StructuralError(f"slot range [{start}, {stop}) outside panel")
        return SpeedPanel(self.values[:, lo:hi], self.valid[:, lo:hi], self.free_flow,
                          self.slots_per_day, self.slot_offset + lo)

    def with_valid(self, valid):
        return SpeedPanel(self.values, valid, self.free_flow, self.slots_per_day, self.slot_offset)

    def equals(self, other):
        return (
            self.slots_per_day == other.slots_per_day
            and self.slot_offset == other.slot_offset
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.free_flow, other.free_flow)
            and np.array_equal(self.values, other.values)
        )


def load_panel(observations: Iterable, free_flow, n_slots=None, slots_per_day=SLOTS_PER_DAY):
    """Build a panel from raw (edge_id, slot, speed_kph) observations.

    Unobserved slots are invalid and hold 0.0; nothing is interpolated.
    """
    ffs = np.asarray(free_flow, dtype=np.float64)
    if ffs.ndim != 1 or ffs.size == 0:
        raise StructuralError("free_flow must be a non-empty vector")
    if np.any(~np.isfinite(ffs)) or np.any(ffs <= 0):
        raise ValidationError("free-flow speeds must be positive")
    obs = [RawObservation(int(e), int(s), float(v)) for e, s, v in observations]
    n_edges = ffs.size
    if n_slots is None:
        n_slots = max((o.slot for o in obs), default=-1) + 1
    values = np.zeros((n_edges, n_slots))
    valid = np.zeros((n_edges, n_slots), dtype=bool)
    for o in obs:
        if not 0 <= o.edge_id < n_edges:
            raise StructuralError(f"edge_id {o.edge_id} out of range [0, {n_edges})")
        if not 0 <= o.slot < n_slots:
            raise StructuralError(f"slot {o.slot} out of range [0, {n_slots})")
        if not math.isfinite(o.speed_kph) or o.speed_kph < 0:
            raise ValidationError(f"invalid speed {o.speed_kph} at edge {o.edge_id}, slot {o.slot}")
        values[o.edge_id, o.slot] = o.speed_kph / ffs[o.edge_id]
        valid[o.edge_id, o.slot] = True
    return SpeedPanel(values, valid, ffs, slots_per_day)


def night_slot_mask(n_slots, slots_per_day=SLOTS_PER_DAY, start_hour=23, end_hour=5, slot_offset=0):
    """Boolean vector, True where the slot's time of day lies in
    [start_hour, end_hour), wrapping past midnight when start > end."""
    per_hour = slots_per_day / 24.0
    tod = (np.arange(slot_offset, slot_offset + n_slots) % slots_per_day) / per_hour
    if start_hour == end_hour:
        return np.zeros(n_slots, dtype=bool)
    if start_hour < end_hour:
        return (tod >= start_hour) & (tod < end_hour)
    return (tod >= start_hour) | (tod < end_hour)


def mask_night_hours(panel: SpeedPanel, start_hour=23, end_hour=5):
    """Mark night slots invalid. Values and the day timeline are untouched."""
    if not (0 <= start_hour < 24 and 0 <= end_hour < 24):
        raise ValidationError("hours must lie in [0, 24)")
    night = night_slot_mask(panel.n_slots, panel.slots_per_day, start_hour, end_hour, panel.slot_offset)
    return panel.with_valid(panel.valid & ~night[None, :])


@dataclass(frozen=True, eq=False)
class PanelSplit:
    """Chronological split on a day boundary.

    ``train`` and ``test`` are disjoint slot views. Test samples are anchored
    in the test range but may read history from earlier days, so ``full`` is
    kept alongside; use ``train_range`` / ``test_range`` to restrict anchors.
    """

    full: SpeedPanel
    boundary_day: int
    train: SpeedPanel = field(init=False)
    test: SpeedPanel = field(init=False)

    def __post_init__(self):
        spd = self.full.slots_per_day
        b = self.full.slot_offset + self.boundary_day * spd
        end = self.full.slot_offset + self.full.n_days * spd
        object.__setattr__(self, "train", self.full.slots(self.full.slot_offset, b))
        object.__setattr__(self, "test", self.full.slots(b, end))

    @property
    def train_range(self):
        return (self.train.slot_offset, self.train.slot_offset + self.train.n_slots)

    @property
    def test_range(self):
        return (self.test.slot_offset, self.test.slot_offset + self.test.n_slots)


def split_day(n_days, train_fraction):
    """Day index of the boundary nearest to ``train_fraction * n_days``,
    kept inside [1, n_days - 1]."""
    if not 0 < train_fraction < 1:
        raise ValidationError("train_fraction must lie in (0, 1)")
    if n_days < 2:
        raise ValidationError("need at least 2 days to split")
    b = int(math.floor(train_fraction * n_days + 0.5))
    return min(max(b, 1), n_days - 1)


def chronological_split(panel: SpeedPanel, train_fraction):
    return PanelSplit(panel, split_day(panel.n_days, train_fraction))


@dataclass(frozen=True)
class SyntheticConfig:
    n_edges: int = 32
    n_days: int = 60
    congestion_amplitude: float = 0.6
    noise_std: float = 0.03
    rng_seed: int = 0
    free_flow_kph: float = 65.0

    def __post_init__(self):
        if self.n_edges < 1:
            raise ValidationError("n_edges must be >= 1")
        if self.n_days < 9:
            raise ValidationError("n_days must be >= 9")
        if not 0 <= self.congestion_amplitude <= 1:
            raise ValidationError("congestion_amplitude must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if self.free_flow_kph <= 0:
            raise ValidationError("free_flow_kph must be positive")


# dip shape, in hours
_MORNING_PEAK, _MORNING_WIDTH = 8.0, 0.75
_EVENING_PEAK, _EVENING_WIDTH, _EVENING_DEPTH = 18.0, 1.0, 0.8
_WEEKLY_QUIET_FACTOR = 0.3
_ONSET_JITTER_H = 0.25
_UPSTREAM_LAG_H = 0.5


def _smooth_cyclic(z, width):
    """Cyclic moving average along the edge axis, rescaled to [-1, 1]."""
    n = z.size
    k = min(width, n)
    acc = sum(np.roll(z, s) for s in range(-(k // 2), k - k // 2))
    acc = acc - acc.mean()
    m = np.abs(acc).max()
    return acc / m if m > 0 else acc


def generate_synthetic(cfg: SyntheticConfig):
    """Seasonal traffic panel with morning and evening congestion dips.

    Each edge runs at free flow overnight and dips around 08:00 and 18:00.
    Dip depth is ``congestion_amplitude`` times a smooth per-edge factor
    (within +-8%) times a per-day factor (within +-5%); every 7th day is
    quiet (dips scaled by 0.3). Congestion onsets jitter by up to 15 min per
    day and lag by up to 30 min along the edge sequence, so neighbouring edges
    are correlated. White noise of ``noise_std`` is added and values are
    clipped to [0.05, 1.2].
    """
    rng = np.random.default_rng(cfg.rng_seed)
    spd = SLOTS_PER_DAY
    n_edges, n_days = cfg.n_edges, cfg.n_days
    edge_depth = 1.0 + 0.08 * _smooth_cyclic(rng.standard_normal(n_edges), 5)
    lag = _UPSTREAM_LAG_H * (0.5 + 0.5 * _smooth_cyclic(rng.standard_normal(n_edges), 9))
    day_depth = rng.uniform(0.95, 1.05, size=n_days)
    day_depth[6::7] *= _WEEKLY_QUIET_FACTOR
    jitter_m = rng.uniform(-_ONSET_JITTER_H, _ONSET_JITTER_H, size=n_days)
    jitter_e = rng.uniform(-_ONSET_JITTER_H, _ONSET_JITTER_H, size=n_days)

    hours = np.arange(spd) * (24.0 / spd)
    values = np.empty((n_edges, n_days * spd))
    for d in range(n_days):
        mu_m = _MORNING_PEAK + jitter_m[d] + lag[:, None]
        mu_e = _EVENING_PEAK + jitter_e[d] + lag[:, None]
        dip = np.exp(-0.5 * ((hours[None, :] - mu_m) / _MORNING_WIDTH) ** 2)
        dip += _EVENING_DEPTH * np.exp(-0.5 * ((hours[None, :] - mu_e) / _EVENING_WIDTH) ** 2)
        depth = cfg.congestion_amplitude * edge_depth[:, None] * day_depth[d]
        values[:, d * spd:(d + 1) * spd] = 1.0 - depth * dip
    if cfg.noise_std > 0:
        values += rng.normal(0.0, cfg.noise_std, size=values.shape)
    np.clip(values, 0.05, 1.2, out=values)
    valid = np.ones(values.shape, dtype=bool)
    return SpeedPanel(values, valid, np.full(n_edges, cfg.free_flow_kph), spd)


# --- file formats -----------------------------------------------------------

def read_speeds_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"edge_id", "slot", "speed_kph"} - set(reader.fieldnames or ())
        if missing:
            raise StructuralError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            yield RawObservation(int(row["edge_id"]), int(row["slot"]), float(row["speed_kph"]))


def read_ffs_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"edge_id", "ffs_kph"} - set(reader.fieldnames or ())
        if missing:
            raise StructuralError(f"{path}: missing columns {sorted(missing)}")
        rows = [(int(r["edge_id"]), float(r["ffs_kph"])) for r in reader]
    if not rows:
        raise StructuralError(f"{path}: no free-flow rows")
    n = max(e for e, _ in rows) + 1
    ffs = np.full(n, np.nan)
    for e, v in rows:
        if e < 0:
            raise StructuralError(f"negative edge_id {e}")
        ffs[e] = v
    if np.any(np.isnan(ffs)):
        raise StructuralError(f"{path}: free-flow speed missing for some edges")
    return ffs


def write_panel(panel: SpeedPanel, path):
    """Write the ``FCD1`` cache.

    Layout (little-endian): magic ``FCD1``; u32 L; u32 S; u32 slots_per_day;
    L*S f64 values row-major; L*S mask bytes (0/1); then a trailer of L f64
    free-flow speeds.
    """
    L, S = panel.values.shape
    with open(path, "wb") as fh:
        fh.write(PANEL_MAGIC)
        fh.write(struct.pack("<III", L, S, panel.slots_per_day))
        fh.write(np.ascontiguousarray(panel.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(panel.valid, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(panel.free_flow, dtype="<f8").tobytes())


def read_panel(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != PANEL_MAGIC:
        raise StructuralError(f"{path}: not an FCD1 panel")
    L, S, spd = struct.unpack_from("<III", buf, 4)
    off = 16
    n = L * S
    if len(buf) < off + 9 * n:
        raise StructuralError(f"{path}: truncated panel")
    values = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(L, S)
    off += 8 * n
    valid = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).reshape(L, S).astype(bool)
    off += n
    if len(buf) >= off + 8 * L:
        ffs = np.frombuffer(buf, dtype="<f8", count=L, offset=off)
    else:
        ffs = np.ones(L)
    return SpeedPanel(values.astype(np.float64), valid, ffs.astype(np.float64), spd)
