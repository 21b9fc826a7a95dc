"""FNN-1/FNN-3, VGG-style CNN and one-layer LSTM assembled from ``fcdcast.nn``.

Hidden units follow the weight-averaging (or convolution), activation,
batch-norm order; the output unit is a bias-free dense layer followed by the
[0, 1] output clamp.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from fcdcast.data import ValidationError
from fcdcast.featurize import FullInputSpec, lstm_feedback_map, spec_for_mode
from fcdcast.nn import (
    ELU,
    LSTM,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    LeakyReLU,
    MaxPool2D,
    OutputClamp,
    RecurrentModel,
    Sequential,
    init_glorot,
    init_lstm_diagonal,
)
from fcdcast.nn.gradcheck import frozen_batchnorm_stats
from fcdcast.nn.layers import CLAMP_GRADS, conv_output_size, pool_output_size
from fcdcast.nn.lstm import GATES

MODEL_KINDS = ("fnn1", "fnn3", "vgg", "lstm")

# externally reported weight counts (FNN-3 full input, VGG, LSTM reduced input)
REPORTED_WEIGHT_COUNTS = {"fnn3": 284672, "vgg": 243712, "lstm": 8224}


class ConfigError(ValidationError):
    pass


def _activation(name, slope):
    if name == "leaky_relu":
        return LeakyReLU(slope)
    if name == "elu":
        return ELU()
    raise ConfigError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class FnnConfig:
    input_size: int
    hidden_size: int = 32
    n_hidden: int = 1
    output_size: int = 20
    activation: str = "leaky_relu"
    slope: float = 0.01
    bn_momentum: float | None = None
    clamp_grad: str = "revive"

    def __post_init__(self):
        if min(self.input_size, self.hidden_size, self.output_size) < 1 or self.n_hidden < 1:
            raise ConfigError("FNN sizes must be positive")


def build_fnn(cfg: FnnConfig, rng):
    layers = []
    f_prev = cfg.input_size
    for _ in range(cfg.n_hidden):
        layers.append(Dense(init_glorot((f_prev, cfg.hidden_size), rng)))
        layers.append(_activation(cfg.activation, cfg.slope))
        layers.append(BatchNorm(cfg.hidden_size, momentum=cfg.bn_momentum))
        f_prev = cfg.hidden_size
    layers.append(Dense(init_glorot((f_prev, cfg.output_size), rng)))
    layers.append(OutputClamp(cfg.clamp_grad))
    return Sequential(layers, {"kind": "fnn", **asdict(cfg)})


@dataclass(frozen=True)
class VggConfig:
    in_channels: int = 8
    height: int = 32
    width: int = 32
    # (channels, convs) per block; pooling after each block
    blocks: tuple = ((32, 2), (64, 2), (128, 3), (256, 3), (256, 3))
    fc_sizes: tuple = (512, 512)
    output_size: int = 640
    conv_r: int = 3
    conv_stride: int = 1
    conv_pad: int = 1
    pool_r: int = 2
    pool_stride: int = 2
    activation: str = "leaky_relu"
    slope: float = 0.01
    bn_momentum: float | None = None
    clamp_grad: str = "revive"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        object.__setattr__(self, "fc_sizes", tuple(int(v) for v in self.fc_sizes))

    @property
    def n_weight_layers(self):
        return sum(n for _, n in self.blocks) + len(self.fc_sizes) + 1


def build_vgg(cfg: VggConfig, rng):
    layers = []
    c, h, w = cfg.in_channels, cfg.height, cfg.width
    try:
        for out_c, n_conv in cfg.blocks:
            for _ in range(n_conv):
                layers.append(Conv2D(init_glorot((out_c, c, cfg.conv_r, cfg.conv_r), rng),
                                     cfg.conv_stride, cfg.conv_pad))
                layers.append(_activation(cfg.activation, cfg.slope))
                layers.append(BatchNorm(out_c, momentum=cfg.bn_momentum))
                h = conv_output_size(h, cfg.conv_r, cfg.conv_stride, cfg.conv_pad)
                w = conv_output_size(w, cfg.conv_r, cfg.conv_stride, cfg.conv_pad)
                c = out_c
            layers.append(MaxPool2D(cfg.pool_r, cfg.pool_stride))
            h = pool_output_size(h, cfg.pool_r, cfg.pool_stride)
            w = pool_output_size(w, cfg.pool_r, cfg.pool_stride)
    except ValueError as exc:
        raise ConfigError(f"VGG plan underflows the {cfg.height}x{cfg.width} input: {exc}") from exc
    layers.append(Flatten())
    f_prev = c * h * w
    for size in cfg.fc_sizes:
        layers.append(Dense(init_glorot((f_prev, size), rng)))
        layers.append(_activation(cfg.activation, cfg.slope))
        layers.append(BatchNorm(size, momentum=cfg.bn_momentum))
        f_prev = size
    layers.append(Dense(init_glorot((f_prev, cfg.output_size), rng)))
    layers.append(OutputClamp(cfg.clamp_grad))
    config = asdict(cfg)
    config["blocks"] = [list(b) for b in cfg.blocks]
    config["fc_sizes"] = list(cfg.fc_sizes)
    return Sequential(layers, {"kind": "vgg", **config})


@dataclass(frozen=True)
class LstmConfig:
    input_size: int
    hidden_size: int = 32
    t_steps: int = 20
    output_size: int = 1
    init_eps: float = 1e-2
    bn_momentum: float | None = None
    clamp_grad: str = "revive"


def build_lstm(cfg: LstmConfig, rng, feedback_map=None):
    """BN on the cell input (statistics pooled over batch and time), one LSTM
    layer, and a dense head shared across time steps."""
    f_in, f_h = cfg.input_size, cfg.hidden_size
    wx = {k: init_glorot((f_in, f_h), rng) for k in GATES}
    wh = {k: init_lstm_diagonal(f_h, rng, cfg.init_eps) for k in GATES}
    layers = [
        BatchNorm(f_in, momentum=cfg.bn_momentum),
        LSTM(wx, wh),
        Dense(init_glorot((f_h, cfg.output_size), rng)),
        OutputClamp(cfg.clamp_grad),
    ]
    return RecurrentModel(layers, {"kind": "lstm", **asdict(cfg)}, feedback_map)


def count_parameters(model):
    """Weight-matrix entries per layer, BN scale/shift excluded."""
    counts = {}
    for name, w in model.weights():
        layer_name = name.rsplit(".", 1)[0]
        counts[layer_name] = counts.get(layer_name, 0) + int(w.size)
    return counts


def total_parameters(model):
    return sum(count_parameters(model).values())


def fnn_weight_count(f0, f_h, n_hidden, f_out):
    return f0 * f_h + (n_hidden - 1) * f_h * f_h + f_h * f_out


def lstm_weight_count(f0, f_h, f_out):
    return 4 * (f0 * f_h + f_h * f_h) + f_h * f_out


def vgg_weight_count(cfg: VggConfig):
    total = 0
    c, h, w = cfg.in_channels, cfg.height, cfg.width
    for out_c, n_conv in cfg.blocks:
        for _ in range(n_conv):
            total += out_c * c * cfg.conv_r ** 2
            c = out_c
            h = conv_output_size(h, cfg.conv_r, cfg.conv_stride, cfg.conv_pad)
            w = conv_output_size(w, cfg.conv_r, cfg.conv_stride, cfg.conv_pad)
        h = pool_output_size(h, cfg.pool_r, cfg.pool_stride)
        w = pool_output_size(w, cfg.pool_r, cfg.pool_stride)
    f_prev = c * h * w
    for size in cfg.fc_sizes:
        total += f_prev * size
        f_prev = size
    return total + f_prev * cfg.output_size


# --- config-driven construction ----------------------------------------------

@dataclass
class ModelSpec:
    """What the CLI and checkpoints need to rebuild a model."""

    model: str = "fnn1"
    mode: str = "reduced"
    hidden_size: int = 32
    t_steps: int = 20
    activation: str = "leaky_relu"
    slope: float = 0.01
    bn_momentum: float | None = None
    # "revive" lets outputs stuck outside [0, 1] recover during training;
    # "subgradient" is the exact clamp derivative
    clamp_grad: str = "revive"
    vgg: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.mode not in ("full", "reduced"):
            raise ConfigError(f"mode must be 'full' or 'reduced', got {self.mode!r}")
        if self.model == "vgg" and self.mode != "full":
            raise ConfigError("the CNN only takes the full input")
        if self.clamp_grad not in CLAMP_GRADS:
            raise ConfigError(f"clamp_grad must be one of {CLAMP_GRADS}, got {self.clamp_grad!r}")

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    def input_spec(self):
        return spec_for_mode(self.mode)


def build_model(ms: ModelSpec, rng):
    spec = ms.input_spec()
    if ms.model in ("fnn1", "fnn3"):
        cfg = FnnConfig(spec.input_size, ms.hidden_size, 1 if ms.model == "fnn1" else 3,
                        spec.output_size, ms.activation, ms.slope, ms.bn_momentum, ms.clamp_grad)
        return build_fnn(cfg, rng)
    if ms.model == "vgg":
        assert isinstance(spec, FullInputSpec)
        vcfg = dict(ms.vgg)
        vcfg.setdefault("in_channels", spec.df + 1)
        vcfg.setdefault("height", spec.n0)
        vcfg.setdefault("width", spec.bf)
        vcfg.setdefault("output_size", spec.output_size)
        vcfg.setdefault("activation", ms.activation)
        vcfg.setdefault("slope", ms.slope)
        vcfg.setdefault("bn_momentum", ms.bn_momentum)
        vcfg.setdefault("clamp_grad", ms.clamp_grad)
        return build_vgg(VggConfig(**vcfg), rng)
    cfg = LstmConfig(spec.input_size, ms.hidden_size, ms.t_steps, spec.n_out_edges,
                     bn_momentum=ms.bn_momentum, clamp_grad=ms.clamp_grad)
    return build_lstm(cfg, rng, lstm_feedback_map(spec, ms.t_steps))


def reported_comparison(ms: ModelSpec, model):
    """Our count next to the reported one for the same architecture family,
    or None when nothing comparable was reported."""
    key = "fnn3" if ms.model == "fnn3" else ms.model
    if key not in REPORTED_WEIGHT_COUNTS:
        return None
    return {"ours": total_parameters(model), "reported": REPORTED_WEIGHT_COUNTS[key]}


def toy_problem(kind, rng, margin=0.1, max_draws=50):
    """A model of ``kind`` small enough for finite differences, plus a batch.

    Returns ``(model, x, y)``. The conv toy has one conv+pool block on a 4x4
    two-channel input; the LSTM toy unrolls two steps. Output weights are
    fitted so every pre-clamp value sits inside ``[margin, 1 - margin]``
    with moderate weights (draws are repeated until that holds): on the flat part of the clamp a
    weight has zero gradient and the check says nothing about it.
    """
    if kind not in MODEL_KINDS:
        raise ConfigError(f"model must be one of {MODEL_KINDS}, got {kind!r}")
    for _ in range(max_draws):
        model, x, y = _toy_draw(kind, rng)
        dense = model.layers[-2]
        with frozen_batchnorm_stats(model):
            model.forward(x, train=True)
            hidden = dense._x.reshape(-1, dense.shape[0])
            theta = np.linalg.lstsq(hidden, np.full((hidden.shape[0], dense.shape[1]), 0.5), rcond=None)[0]
            dense.params["theta"] = theta + rng.normal(scale=0.05, size=theta.shape) / np.abs(hidden).max()
            model.forward(x, train=True)
        pre = model.layers[-1]._x
        # large fitted weights mean an ill-conditioned fit and a strongly
        # curved loss, where central differences lose accuracy
        if (pre.min() >= margin and pre.max() <= 1 - margin and np.abs(theta).max() <= 3.0
                and kink_distance(model, x) >= 1e-3):
            return model, x, y
    raise ConfigError(f"no {kind} toy problem with outputs inside the clamp after {max_draws} draws")


def kink_distance(model, x):
    """How far the model sits from its non-differentiable points on batch ``x``.

    The minimum over weight entries (the l1 penalty's kink at 0), leaky-ReLU
    inputs (kink at 0) and max-pool windows (gap between the largest and the
    runner-up). A finite-difference step larger than this can straddle a kink.
    """
    dist = min(float(np.abs(w).min()) for _, w in model.weights())
    if not isinstance(model, Sequential):
        return dist
    h = x
    with frozen_batchnorm_stats(model):
        for layer in model.layers:
            if isinstance(layer, LeakyReLU):
                dist = min(dist, float(np.abs(h).min()))
            elif isinstance(layer, MaxPool2D):
                r, st = layer.r, layer.stride
                oh, ow = pool_output_size(h.shape[2], r, st), pool_output_size(h.shape[3], r, st)
                for i in range(oh):
                    for j in range(ow):
                        win = np.sort(h[:, :, i * st:i * st + r, j * st:j * st + r].reshape(*h.shape[:2], -1), axis=-1)
                        dist = min(dist, float((win[..., -1] - win[..., -2]).min()))
            h = layer.forward(h, train=True)
    return dist


def _toy_draw(kind, rng):
    if kind in ("fnn1", "fnn3"):
        model = build_fnn(FnnConfig(4, 3, 1 if kind == "fnn1" else 3, 2), rng)
        x = rng.normal(size=(16, 4))
        y = rng.uniform(0.2, 0.8, size=(16, 2))
    elif kind == "vgg":
        model = build_vgg(VggConfig(in_channels=2, height=4, width=4, blocks=((2, 1),),
                                    fc_sizes=(3,), output_size=2), rng)
        x = rng.normal(size=(8, 2, 4, 4))
        y = rng.uniform(0.2, 0.8, size=(8, 2))
    else:
        model = build_lstm(LstmConfig(3, 4, t_steps=2, output_size=2, init_eps=0.1), rng)
        x = rng.normal(size=(8, 2, 3))
        y = rng.uniform(0.2, 0.8, size=(8, 2, 2))
    for bn in model.batchnorms():
        bn.params["beta"] = 1.0 + rng.uniform(0.0, 0.5, size=bn.params["beta"].shape)
        bn.params["gamma"] = rng.uniform(0.2, 0.6, size=bn.params["gamma"].shape)
    return model, x, y
