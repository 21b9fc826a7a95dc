"""RMSE, MAPE and Q-score against the real-time propagation benchmark
(RTPB: every future speed predicted as the last observed one), per-horizon
curves, speed-regime breakdowns, and CSV/SVG report writers."""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from fcdcast.data import ValidationError

MAPE_FLOOR = 1e-6
REGIMES = ("all", "constant", "changing", "standard")


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """Predictions and ground truth of shape (n, L, H) in normalized units.

    ``anchor`` (n, L) is the last observed speed before the horizon starts,
    ``history`` (n, L, B) the observed lookback speeds, and ``ffs`` (n, L)
    the free-flow speed of each edge (kph), or None for normalized output.
    """

    pred: np.ndarray
    truth: np.ndarray
    anchor: np.ndarray
    history: np.ndarray | None = None
    ffs: np.ndarray | None = None

    def __post_init__(self):
        for name in ("pred", "truth", "anchor", "history", "ffs"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=np.float64))
        if self.pred.shape != self.truth.shape or self.pred.ndim != 3:
            raise ValidationError("pred and truth must share an (n, L, H) shape")
        if self.anchor.shape != self.pred.shape[:2]:
            raise ValidationError("anchor must have shape (n, L)")
        if self.ffs is not None and self.ffs.shape != self.pred.shape[:2]:
            raise ValidationError("ffs must have shape (n, L)")
        if not (np.all(np.isfinite(self.pred)) and np.all(np.isfinite(self.truth))):
            raise ValidationError("predictions and ground truth must be finite")

    @property
    def horizon(self):
        return self.pred.shape[2]

    def __len__(self):
        return self.pred.shape[0]

    def subset(self, idx):
        return PredictionSet(
            self.pred[idx], self.truth[idx], self.anchor[idx],
            None if self.history is None else self.history[idx],
            None if self.ffs is None else self.ffs[idx],
        )

    def with_pred(self, pred):
        return PredictionSet(pred, self.truth, self.anchor, self.history, self.ffs)


def _errors(ps: PredictionSet, pred=None):
    """Per-entry errors, converted to kph per edge when free-flow speeds are set."""
    err = (ps.pred if pred is None else pred) - ps.truth
    if ps.ffs is not None:
        err = err * ps.ffs[:, :, None]
    return err


def rmse(ps: PredictionSet, pred=None):
    """Per-horizon RMSE (length H) and the aggregate over all horizons."""
    if len(ps) == 0:
        raise ValidationError("cannot compute RMSE of an empty prediction set")
    sq = _errors(ps, pred) ** 2
    per_h = np.sqrt(sq.mean(axis=(0, 1)))
    return per_h, float(np.sqrt(sq.mean()))


def rmse_values(errors):
    """RMSE of a flat collection of errors."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValidationError("cannot compute RMSE of no errors")
    return float(np.sqrt(np.mean(e * e)))


def rtpb_predict(ps: PredictionSet):
    return np.repeat(ps.anchor[:, :, None], ps.horizon, axis=2)


def q_score(model_rmse, bench_rmse):
    """``1 - rmse**2 / bench**2``; NaN (undefined) where the benchmark RMSE is 0."""
    m = np.asarray(model_rmse, dtype=np.float64)
    b = np.asarray(bench_rmse, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(b > 0, 1.0 - (m * m) / np.where(b > 0, b * b, 1.0), np.nan)
    return float(q) if q.ndim == 0 else q


@dataclass
class MapeResult:
    per_horizon: np.ndarray
    aggregate: float
    n_excluded: int


def mape(ps: PredictionSet, pred=None):
    """``100 * mean |1 - pred / truth|`` per horizon; entries with
    ``|truth| < 1e-6`` are excluded and tallied."""
    p = ps.pred if pred is None else pred
    keep = np.abs(ps.truth) >= MAPE_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        ape = np.where(keep, np.abs(1.0 - p / np.where(keep, ps.truth, 1.0)), 0.0)
    counts = keep.sum(axis=(0, 1))
    with np.errstate(invalid="ignore"):
        per_h = 100.0 * ape.sum(axis=(0, 1)) / counts
    total = keep.sum()
    agg = 100.0 * float(ape.sum()) / total if total else math.nan
    return MapeResult(per_h, agg, int((~keep).sum()))


@dataclass
class RegimeSplit:
    labels: np.ndarray
    variation: np.ndarray
    fractions: tuple = (0.10, 0.10, 0.80)

    def indices(self, regime):
        return np.nonzero(self.labels == regime)[0]


def variation_statistic(ps: PredictionSet):
    """Standard deviation of ground truth over the lookback plus horizon
    window of each sample, pooled across its edges."""
    if ps.history is None:
        window = ps.truth
    else:
        window = np.concatenate([ps.history, ps.truth], axis=2)
    return window.reshape(len(ps), -1).std(axis=1)


def regime_split(ps_or_variation, fraction=0.10):
    """Bottom ``fraction`` of samples by variation -> constant, top ->
    changing, rest -> standard. Ties keep anchor order (stable sort)."""
    if isinstance(ps_or_variation, PredictionSet):
        var = variation_statistic(ps_or_variation)
    else:
        var = np.asarray(ps_or_variation, dtype=np.float64)
    n = var.size
    if n < 10:
        raise ValidationError("regime split needs at least 10 samples")
    k = int(math.floor(fraction * n + 0.5))
    order = np.argsort(var, kind="stable")
    labels = np.full(n, "standard", dtype=object)
    labels[order[:k]] = "constant"
    labels[order[n - k:]] = "changing"
    return RegimeSplit(labels, var, (fraction, fraction, 1 - 2 * fraction))


@dataclass
class EvalReport:
    rmse: np.ndarray
    rmse_bench: np.ndarray
    q2: np.ndarray
    mape: np.ndarray
    rmse_all: float
    rmse_bench_all: float
    q2_all: float
    mape_all: float
    n_samples: int
    mape_excluded: int = 0
    regimes: dict = field(default_factory=dict)

    @property
    def horizon(self):
        return self.rmse.size

    def rows(self, regime="all"):
        """CSV rows (horizon, rmse, rmse_bench, q2, mape, regime), per horizon
        then one aggregate row with horizon ``all``."""
        out = [(str(h), self.rmse[h], self.rmse_bench[h], self.q2[h], self.mape[h], regime)
               for h in range(self.horizon)]
        out.append(("all", self.rmse_all, self.rmse_bench_all, self.q2_all, self.mape_all, regime))
        return out


def report_for(ps: PredictionSet):
    per_h, agg = rmse(ps)
    bench_pred = rtpb_predict(ps)
    b_per_h, b_agg = rmse(ps, bench_pred)
    mp = mape(ps)
    return EvalReport(per_h, b_per_h, q_score(per_h, b_per_h), mp.per_horizon, agg, b_agg,
                      q_score(agg, b_agg), mp.aggregate, len(ps), mp.n_excluded)


def evaluate_predictions(ps: PredictionSet, regimes=True):
    """Full report, with constant/changing/standard sub-reports when asked."""
    if len(ps) == 0:
        raise ValidationError("empty test set")
    report = report_for(ps)
    if regimes:
        split = regime_split(ps)
        for name in ("constant", "changing", "standard"):
            idx = split.indices(name)
            if idx.size:
                report.regimes[name] = report_for(ps.subset(idx))
    return report


def evaluate_model(predict, ps: PredictionSet, regimes=True):
    """``predict`` maps the prediction set to (n, L, H) predictions; the
    ``pred`` field of ``ps`` is ignored and replaced."""
    return evaluate_predictions(ps.with_pred(np.asarray(predict(ps), dtype=np.float64)), regimes)


def _fmt(v):
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)) or (np.ndim(v) == 0 and np.isnan(v)):
        return "nan"
    return repr(float(v))


def write_report_csv(report: EvalReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["horizon", "rmse_kph", "rmse_bench_kph", "q2", "mape", "regime"])
        for row in report.rows("all"):
            writer.writerow([_fmt(v) for v in row])
        for name in ("constant", "changing", "standard"):
            if name in report.regimes:
                for row in report.regimes[name].rows(name):
                    writer.writerow([_fmt(v) for v in row])


def read_report_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- SVG ------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _panel_svg(x0, y0, w, h, title, series, y_label):
    """One line-chart panel. ``series`` is a list of (name, xs, ys)."""
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys) if np.isfinite(y)]
    if not pts:
        return [f'<text x="{x0 + 10}" y="{y0 + 20}">{title}: no data</text>']
    xmin = min(p[0] for p in pts)
    xmax = max(p[0] for p in pts)
    ymin = min(p[1] for p in pts)
    ymax = max(p[1] for p in pts)
    if ymax == ymin:
        ymax, ymin = ymax + 0.5, ymin - 0.5
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad
    left, right, top, bottom = x0 + 55, x0 + w - 110, y0 + 30, y0 + h - 35

    def sx(x):
        return left + (x - xmin) / ((xmax - xmin) or 1) * (right - left)

    def sy(y):
        return bottom - (y - ymin) / (ymax - ymin) * (bottom - top)

    out = [
        f'<text x="{x0 + w / 2:.1f}" y="{y0 + 18}" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="#000"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="#000"/>',
        f'<text x="{(left + right) / 2:.1f}" y="{bottom + 28}" text-anchor="middle" font-size="11">'
        f'horizon (3-min steps)</text>',
        f'<text x="{x0 + 12}" y="{(top + bottom) / 2:.1f}" font-size="11" '
        f'transform="rotate(-90 {x0 + 12} {(top + bottom) / 2:.1f})" text-anchor="middle">{y_label}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        yv = ymin + frac * (ymax - ymin)
        out.append(f'<text x="{left - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end" font-size="10">{yv:.3g}</text>')
    if ymin < 0 < ymax:
        out.append(f'<line x1="{left}" y1="{sy(0):.1f}" x2="{right}" y2="{sy(0):.1f}" '
                   f'stroke="#888" stroke-dasharray="4 3"/>')
    for i, (name, xs, ys) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys) if np.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = top + 14 * i
        out.append(f'<line x1="{right + 10}" y1="{ly}" x2="{right + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{right + 32}" y="{ly + 4}" font-size="11">{name}</text>')
    return out


def write_report_svg(reports, path):
    """RMSE and Q-score versus horizon. ``reports`` maps a series name to an
    :class:`EvalReport`; regime sub-reports are added as extra series."""
    rmse_series, q_series = [], []
    for name, rep in reports.items():
        xs = list(range(rep.horizon))
        rmse_series.append((name, xs, list(rep.rmse)))
        q_series.append((name, xs, list(rep.q2)))
        if len(reports) == 1:
            rmse_series.append(("RTPB", xs, list(rep.rmse_bench)))
        for regime, sub in rep.regimes.items():
            label = regime if len(reports) == 1 else f"{name}/{regime}"
            rmse_series.append((label, xs, list(sub.rmse)))
            q_series.append((label, xs, list(sub.q2)))
    w, h = 720, 300
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{2 * h}" '
        f'viewBox="0 0 {w} {2 * h}" font-family="sans-serif">',
        f'<rect width="{w}" height="{2 * h}" fill="#fff"/>',
    ]
    parts += _panel_svg(0, 0, w, h, "RMSE", rmse_series, "RMSE")
    parts += _panel_svg(0, h, w, h, "Q-score", q_series, "Q2")
    parts.append("</svg>")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
