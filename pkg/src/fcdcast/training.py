"""Mini-batch training with Adam, learning-rate decay, elastic-net
regularization and early stopping on validation RMSE."""
import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from fcdcast.data import ValidationError
from fcdcast.nn import Adam, elastic_net_grad, elastic_net_penalty, quadratic_loss


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the state needed for a post-mortem."""

    def __init__(self, message, iteration, batch_indices, state):
        super().__init__(message)
        self.iteration = iteration
        self.batch_indices = batch_indices
        self.state = state


@dataclass
class TrainConfig:
    t_mb: int = 50
    max_epochs: int = 5000
    eta0: float = 3e-3
    alpha0: float = 0.0
    lambda_l1: float = 1e-4
    lambda_l2: float = 1e-4
    patience: int = 20
    val_every: int = 100
    val_fraction: float = 0.1
    rng_seed: int = 0
    bias_correction: bool = False
    # batches used to re-estimate BN running statistics on the current
    # weights before each validation check (0 keeps the accumulated ones)
    bn_recalibrate: int = 50

    def __post_init__(self):
        if self.t_mb < 2:
            raise ValidationError("t_mb must be >= 2 for batch normalization")
        if not 0 < self.val_fraction < 1:
            raise ValidationError("val_fraction must lie in (0, 1)")
        if self.max_epochs < 1 or self.val_every < 1 or self.patience < 1:
            raise ValidationError("max_epochs, val_every and patience must be positive")
        if self.eta0 <= 0:
            raise ValidationError("eta0 must be positive")
        if self.lambda_l1 < 0 or self.lambda_l2 < 0:
            raise ValidationError("regularization strengths must be non-negative")
        if self.bn_recalibrate < 0:
            raise ValidationError("bn_recalibrate must be non-negative")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_dict(self):
        return asdict(self)


class ArrayDataset:
    """In-memory (X, Y) pairs; axis 0 indexes samples."""

    def __init__(self, X, Y):
        self.X = np.asarray(X, dtype=np.float64)
        self.Y = np.asarray(Y, dtype=np.float64)
        if len(self.X) != len(self.Y):
            raise ValidationError("X and Y must have the same number of samples")

    def __len__(self):
        return len(self.X)

    def batch(self, idx):
        return self.X[idx], self.Y[idx]


def as_dataset(data):
    if data is None or hasattr(data, "batch"):
        return data
    X, Y = data
    return ArrayDataset(X, Y)


def predict_in_chunks(model, ds, chunk=2048):
    preds, targets = [], []
    for start in range(0, len(ds), chunk):
        idx = np.arange(start, min(start + chunk, len(ds)))
        X, Y = ds.batch(idx)
        preds.append(model.predict(X))
        targets.append(Y)
    return np.concatenate(preds), np.concatenate(targets)


def validate(model, data, ffs=None):
    """RMSE of ``model.predict`` over a dataset in inference mode, in kph when
    ``ffs`` (scalar or broadcastable to the targets) is given."""
    ds = as_dataset(data)
    if ds is None or len(ds) == 0:
        raise ValidationError("empty validation set")
    pred, target = predict_in_chunks(model, ds)
    err = pred - target
    if ffs is not None:
        err = err * np.asarray(ffs, dtype=np.float64)
    return float(np.sqrt(np.mean(err * err)))


@dataclass
class TrainLog:
    iters: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    val_rmse: dict = field(default_factory=dict)
    best_iter: int = -1
    best_val_rmse: float = math.inf
    stop_reason: str = ""
    optimizer_state: dict = None

    def rows(self):
        for it, loss, eta in zip(self.iters, self.train_loss, self.eta):
            yield it, loss, self.val_rmse.get(it), eta

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "train_loss", "val_rmse", "eta"])
            for it, loss, val, eta in self.rows():
                w.writerow([it, repr(float(loss)), "" if val is None else repr(float(val)), repr(float(eta))])


def recalibrate_batchnorm(model, data, n_batches, t_mb, rng):
    """Recompute BN running statistics for the current weights.

    The counters are reset and ``n_batches`` random training batches are
    pushed through in train mode, so the running average only sees
    activations of the final parameters instead of every iterate since
    initialization. Parameters and gradients are left untouched.
    """
    bns = model.batchnorms()
    if not bns or n_batches <= 0:
        return
    ds = as_dataset(data)
    for bn in bns:
        bn.epoch = 0
    for _ in range(n_batches):
        idx = np.sort(rng.choice(len(ds), size=min(t_mb, len(ds)), replace=False))
        X, _ = ds.batch(idx)
        model.forward(X, train=True)


def _snapshot(model):
    return {k: np.array(v, copy=True) for k, v in model.state_dict().items()}


def train(model, train_data, val_data, cfg: TrainConfig, rng=None, val_ffs=None, optimizer_state=None):
    """Optimize ``model`` in place and return (model, TrainLog).

    One iteration ("epoch" in the loss notation) draws ``t_mb`` samples from a
    seeded per-pass shuffle, minimizes quadratic loss plus elastic net with
    Adam, then decays the learning rate. Validation RMSE is computed every
    ``val_every`` iterations; training stops after ``patience`` checks with
    no improvement or at ``max_epochs``, and the best-validation parameters
    are restored. Passing a previous ``log.optimizer_state`` resumes Adam's
    moments and learning rate.
    """
    train_ds = as_dataset(train_data)
    val_ds = as_dataset(val_data)
    n = len(train_ds)
    if n < cfg.t_mb:
        raise ValidationError(f"need at least t_mb={cfg.t_mb} training samples, got {n}")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    entries = model.parameters()
    opt = Adam([layer.params[k] for _, layer, k in entries], cfg.eta0, cfg.alpha0,
               bias_correction=cfg.bias_correction)
    if optimizer_state is not None:
        opt.load_state(optimizer_state)
    is_weight = [k in layer.weight_names for _, layer, k in entries]
    log = TrainLog()
    best_state = None
    checks_since_best = 0
    order = rng.permutation(n)
    cursor = 0
    log.stop_reason = "max_epochs"
    for it in range(cfg.max_epochs):
        if cursor + cfg.t_mb > n:
            order = rng.permutation(n)
            cursor = 0
        idx = np.sort(order[cursor:cursor + cfg.t_mb])
        cursor += cfg.t_mb
        X, Y = train_ds.batch(idx)
        model.zero_grad()
        pred = model.forward(X, train=True)
        loss, dpred = quadratic_loss(pred, Y)
        penalty = elastic_net_penalty([w for _, w in model.weights()], cfg.lambda_l1, cfg.lambda_l2)
        if not (math.isfinite(loss) and math.isfinite(penalty)):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", it, idx, _snapshot(model))
        model.backward(dpred)
        grads = []
        for (name, layer, k), w in zip(entries, is_weight):
            g = layer.grads[k]
            if w and (cfg.lambda_l1 or cfg.lambda_l2):
                g = g + elastic_net_grad(layer.params[k], cfg.lambda_l1, cfg.lambda_l2)
            grads.append(g)
        eta_used = opt.eta
        opt.step(grads)
        log.iters.append(it)
        log.train_loss.append(loss)
        log.eta.append(eta_used)
        if val_ds is not None and len(val_ds) and ((it + 1) % cfg.val_every == 0 or it == cfg.max_epochs - 1):
            recalibrate_batchnorm(model, train_ds, cfg.bn_recalibrate, cfg.t_mb, rng)
            v = validate(model, val_ds, val_ffs)
            log.val_rmse[it] = v
            if v < log.best_val_rmse:
                log.best_val_rmse = v
                log.best_iter = it
                best_state = _snapshot(model)
                checks_since_best = 0
            else:
                checks_since_best += 1
                if checks_since_best >= cfg.patience:
                    log.stop_reason = "patience"
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        recalibrate_batchnorm(model, train_ds, cfg.bn_recalibrate, cfg.t_mb, rng)
        log.best_iter = log.iters[-1] if log.iters else -1
    st = opt.state()
    log.optimizer_state = {"eta": st["eta"], "t": st["t"],
                           "m": [a.copy() for a in st["m"]], "v": [a.copy() for a in st["v"]]}
    return model, log


@dataclass
class GridResult:
    index: int
    candidate: object
    val_rmse: float
    model: object
    log: TrainLog


def grid_search(candidates, train_data, val_data, build_model):
    """Train every candidate and rank by validation RMSE (ties keep candidate
    order). ``build_model(candidate)`` returns ``(model, TrainConfig)``."""
    if not candidates:
        raise ValidationError("grid search needs at least one candidate")
    results = []
    for i, cand in enumerate(candidates):
        model, cfg = build_model(cand)
        model, log = train(model, train_data, val_data, cfg)
        v = validate(model, val_data) if val_data is not None else math.inf
        results.append(GridResult(i, cand, v if math.isfinite(v) else math.inf, model, log))
    results.sort(key=lambda r: (r.val_rmse, r.index))
    return results
