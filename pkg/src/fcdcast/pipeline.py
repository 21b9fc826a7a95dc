"""Glue between panels, featurization, models, training and evaluation."""
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from fcdcast.data import SpeedPanel, ValidationError, mask_night_hours, split_day
from fcdcast.evaluate import PredictionSet, evaluate_predictions
from fcdcast.featurize import build_batch, enumerate_samples, lstm_batch, to_cnn_batch
from fcdcast.models import ModelSpec, build_model
from fcdcast.training import TrainConfig, predict_in_chunks, train


def rng_for(seed, stream):
    """Independent generator for a named sub-stream (data, init, shuffle, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())]))


@dataclass
class DataConfig:
    train_fraction: float = 0.9
    stride: int = 3
    test_stride: int = 1
    night_start: int = 23
    night_end: int = 5
    mask_night: bool = True

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_dict(self):
        return asdict(self)


class AnchorDataset:
    """Samples built on demand from a panel for a given model kind.

    Native shapes: FNN inputs (n, F0) and targets (n, n_out*H); VGG inputs
    (n, df+1, n0, bf); LSTM inputs (n, T, F0) and targets (n, T, n_out).
    """

    def __init__(self, panel: SpeedPanel, spec, anchors, kind, t_steps=20):
        self.panel = panel
        self.spec = spec
        self.anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
        self.kind = kind
        self.t_steps = t_steps

    def __len__(self):
        return len(self.anchors)

    def batch(self, idx):
        a = self.anchors[idx]
        if self.kind == "lstm":
            return lstm_batch(self.panel, self.spec, a, self.t_steps, check=False)
        X, Y = build_batch(self.panel, self.spec, a, check=False)
        if self.kind == "vgg":
            X = to_cnn_batch(X, self.spec)
        return X, Y.reshape(len(a), -1)

    def to_matrix(self, native):
        """Model outputs or targets in native shape -> (n, n_out, H)."""
        native = np.asarray(native)
        n = native.shape[0]
        if self.kind == "lstm":
            return np.ascontiguousarray(native.transpose(0, 2, 1))
        return native.reshape(n, self.spec.n_out_edges, self.spec.horizon)

    def prediction_set(self, pred_native):
        """Evaluation view: ground truth, RTPB anchor (slot T-1), lookback
        history (chronological) and per-edge free-flow speeds."""
        spec, panel = self.spec, self.panel
        a = self.anchors
        n, n_out = len(a), spec.n_out_edges
        rows = (a[:, 0:1] + np.arange(n_out)[None, :]) % panel.n_edges
        local = a[:, 1] - panel.slot_offset
        hist_idx = local[:, None, None] + np.arange(-spec.lookback, 0)[None, None, :]
        truth_idx = local[:, None, None] + np.arange(self.horizon)[None, None, :]
        history = panel.values[rows[:, :, None], hist_idx]
        truth = panel.values[rows[:, :, None], truth_idx]
        return PredictionSet(self.to_matrix(pred_native), truth, history[:, :, -1], history,
                             panel.free_flow[rows])

    @property
    def horizon(self):
        return self.t_steps if self.kind == "lstm" else self.spec.horizon


@dataclass
class Splits:
    panel: SpeedPanel
    train: AnchorDataset
    val: AnchorDataset
    test: AnchorDataset
    boundaries: tuple


def prepare_splits(panel: SpeedPanel, ms: ModelSpec, dc: DataConfig, val_fraction=0.1):
    """Chronological train / validation / test anchors.

    The test range starts at the day boundary nearest ``train_fraction``;
    validation is the last ``val_fraction`` of the training days. Anchors are
    kept only if all target slots lie in their range; inputs may read
    earlier days.
    """
    if dc.mask_night:
        panel = mask_night_hours(panel, dc.night_start, dc.night_end)
    spec = ms.input_spec()
    kind = "lstm" if ms.model == "lstm" else ("vgg" if ms.model == "vgg" else "fnn")
    t_steps = ms.t_steps if kind == "lstm" else 0
    spd = panel.slots_per_day
    test_day = split_day(panel.n_days, dc.train_fraction)
    if test_day < 2:
        raise ValidationError("not enough training days for a validation split")
    val_day = split_day(test_day, 1.0 - val_fraction)
    start = panel.slot_offset
    b_val = start + val_day * spd
    b_test = start + test_day * spd
    end = start + panel.n_days * spd

    def anchors(lo, hi, stride):
        return enumerate_samples(panel, spec, stride, anchor_range=(lo, hi), lstm_steps=t_steps)

    ds = lambda a: AnchorDataset(panel, spec, a, kind, ms.t_steps)  # noqa: E731
    return Splits(
        panel,
        ds(anchors(start, b_val, dc.stride)),
        ds(anchors(b_val, b_test, dc.stride)),
        ds(anchors(b_test, end, dc.test_stride)),
        (b_val, b_test, end),
    )


def run_experiment(panel, ms: ModelSpec, tc: TrainConfig, dc: DataConfig, seed=0, regimes=True):
    """Build, train and evaluate one model. Returns (model, log, report, splits)."""
    splits = prepare_splits(panel, ms, dc, tc.val_fraction)
    if len(splits.train) < tc.t_mb:
        raise ValidationError(f"only {len(splits.train)} training samples")
    model = build_model(ms, rng_for(seed, "init"))
    model, log = train(model, splits.train, splits.val if len(splits.val) else None, tc,
                       rng=rng_for(seed, "shuffle"))
    report = evaluate_dataset(model, splits.test, regimes)
    return model, log, report, splits


def evaluate_dataset(model, ds: AnchorDataset, regimes=True):
    if len(ds) == 0:
        raise ValidationError("empty test set")
    pred, _ = predict_in_chunks(model, ds)
    return evaluate_predictions(ds.prediction_set(pred), regimes)
