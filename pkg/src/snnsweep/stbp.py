"""Spatio-temporal backpropagation: loss, surrogate gradient, BPTT, Adam, training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor
from .errors import ConfigError, InputError, TrainingAborted
from .events import DatasetSplit, encode_frames
from .lif import LifParams, leak
from .network import ForwardRecord, Network, classify, forward

log = logging.getLogger(__name__)

# keys are matched case-insensitively
ALIASES = {
    "b": "batch_size",
    "lr": "learning_rate",
    "w_decay": "weight_decay",
    "wd": "weight_decay",
    "vth": "v_th",
    "t": "timesteps",
    "a": "surrogate_width",
}


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 40
    learning_rate: float = 1e-3
    v_th: float = 0.4
    weight_decay: float = 0.0
    tau: float = 0.25
    timesteps: int = 10
    epochs: int = 200
    seed: int = 0
    surrogate_width: float = 0.5
    decoupled_weight_decay: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            ("batch_size", isinstance(self.batch_size, int) and self.batch_size >= 1, ">= 1"),
            ("learning_rate", self.learning_rate > 0, "> 0"),
            ("v_th", self.v_th > 0, "> 0"),
            ("weight_decay", self.weight_decay >= 0, ">= 0"),
            ("tau", 0 < self.tau < 1, "in (0, 1)"),
            ("timesteps", isinstance(self.timesteps, int) and self.timesteps >= 1, ">= 1"),
            ("epochs", isinstance(self.epochs, int) and self.epochs >= 0, ">= 0"),
            ("surrogate_width", self.surrogate_width > 0, "> 0"),
        ]
        for name, ok, rule in checks:
            if not ok:
                raise ConfigError(f"{name} must be {rule}, got {getattr(self, name)!r}")

    @property
    def lif_params(self) -> LifParams:
        return LifParams(v_th=self.v_th, tau=self.tau)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def canonical(cls, name: str) -> str:
        key = name.strip().lower().replace("-", "_")
        key = ALIASES.get(key, key)
        if key not in cls.field_names():
            raise ConfigError(f"unknown hyperparameter {name!r}")
        return key

    @classmethod
    def coerce(cls, name: str, value):
        """Convert a string value to the type of field ``name``."""
        name = cls.canonical(name)
        kind = {f.name: f.type for f in fields(cls)}[name]
        if not isinstance(value, str):
            return value
        try:
            if kind == "bool":
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if kind == "int":
                return int(value)
            return float(value)
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {value!r} as {kind}") from None

    def with_values(self, **kw) -> "Hyperparams":
        kw = {self.canonical(k): self.coerce(k, v) for k, v in kw.items()}
        return replace(self, **kw)


# -- loss and surrogate --------------------------------------------------------

def one_hot(labels, n_classes=2):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def _check_one_hot(labels):
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or not np.all((labels == 0) | (labels == 1)) or not np.all(labels.sum(1) == 1):
        raise InputError("labels must be a one-hot [S, classes] array")
    return labels


def stbp_loss(outputs_batch, labels) -> float:
    """``L = 1/(2S) * sum_s || y_s - mean_t o_s[t] ||^2`` for outputs ``[S, T, classes]``."""
    o = np.asarray(outputs_batch, dtype=np.float64)
    y = _check_one_hot(labels)
    if o.ndim != 3 or o.shape[0] != y.shape[0] or o.shape[2] != y.shape[1]:
        raise InputError(f"outputs {o.shape} do not match labels {y.shape}")
    rates = o.sum(axis=1) / o.shape[1]
    return float(((y - rates) ** 2).sum() / (2 * o.shape[0]))


def surrogate_grad(v_m, params: LifParams, a: float = 0.5):
    """Rectangular window: ``1/(2a)`` where ``|v_m - v_th| < a``, else 0."""
    if not a > 0:
        raise ConfigError(f"surrogate half-width must be > 0, got {a}")
    v_m = np.asarray(v_m, dtype=np.float64)
    inside = (v_m > params.v_th - a) & (v_m < params.v_th + a)
    return inside / (2.0 * a)


# -- backward ------------------------------------------------------------------

def _lif_backward(grad_o, v, o, params: LifParams, a: float, reset_grad: bool):
    """Reverse-time sweep through ``V[t+1] = V[t] * f(o[t]) + x[t+1]``.

    ``grad_o`` holds dL/do[t] arriving from above (spatial path). Returns
    dL/dx[t]. With ``reset_grad`` false the gate ``f(o[t])`` is treated as a
    constant.
    """
    T = grad_o.shape[0]
    grad_x = np.empty_like(grad_o)
    carry = None
    for t in range(T - 1, -1, -1):
        do = grad_o[t]
        if carry is not None:
            if reset_grad:
                # d f(o) / d o = -tau
                do = do - carry * v[t] * params.tau
            du = do * surrogate_grad(v[t], params, a) + carry * leak(o[t], params)
        else:
            du = do * surrogate_grad(v[t], params, a)
        grad_x[t] = du
        carry = du
    return grad_x


def stbp_backward(record: ForwardRecord, labels, reset_grad: bool = False) -> dict[str, np.ndarray]:
    """Gradients of :func:`stbp_loss` w.r.t. every network parameter.

    ``labels`` is one-hot ``[N, classes]``. The surrogate derivative replaces
    the derivative of the firing function; in smooth mode it is the exact
    derivative of the ramp, so with ``reset_grad=True`` the result is the
    exact gradient of the smooth forward pass.
    """
    net = record.net
    y = _check_one_hot(labels)
    out = record.outputs  # [T, N, classes]
    T, N = out.shape[:2]
    if y.shape != (N, out.shape[2]):
        raise InputError(f"labels {y.shape} do not match outputs for {N} samples")
    rates = out.sum(axis=0) / T
    grad_h = np.broadcast_to(-(y - rates) / (N * T), out.shape).copy()

    lif = net.lif_params
    grads = {}
    has_params_below = [any(l.kind != "avgpool" for l in net.layers[:i]) for i in range(len(net.layers))]
    for i in range(len(net.layers) - 1, -1, -1):
        layer, rec = net.layers[i], record.layers[i]
        if layer.spiking:
            grad_z = _lif_backward(grad_h, rec.v, rec.o, lif, record.a, reset_grad)
        else:
            grad_z = grad_h
        if not has_params_below[i] and layer.kind == "avgpool":
            break
        if layer.kind == "avgpool":
            grad_h = tensor.avgpool_backward(grad_z, layer.spec, layer.in_shape[1:])
            continue
        w = net.params[f"{layer.name}.weight"]
        if layer.kind == "conv":
            gi, gw, gb = tensor.conv2d_backward(grad_z, rec.input, w, layer.spec, rec.cols,
                                                input_grad=has_params_below[i])
        else:
            flat = rec.input.reshape(rec.input.shape[:2] + (-1,))
            gi, gw, gb = tensor.dense_backward(grad_z, flat, w)
            gi = gi.reshape(rec.input.shape)
        grads[f"{layer.name}.weight"] = gw
        grads[f"{layer.name}.bias"] = gb
        if not has_params_below[i]:
            break
        grad_h = gi
    return {k: grads[k] for k in net.params}


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, opt: AdamState, lr: float, w_decay: float = 0.0,
              decoupled: bool = False):
    """One Adam update, in place. Weight decay is added to the gradient
    (L2 penalty) unless ``decoupled`` is set, in which case weights shrink by
    ``lr * w_decay`` directly."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for k, w in params.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ConfigError(f"gradient {k}: shape {g.shape} != parameter {w.shape}")
        if w_decay and not decoupled:
            g = g + w_decay * w
        m = opt.m.get(k)
        if m is None:
            m = opt.m[k] = np.zeros_like(w)
            opt.v[k] = np.zeros_like(w)
        v = opt.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if w_decay and decoupled:
            w *= 1.0 - lr * w_decay
        w -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params, opt


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    seconds: float


TRACE_HEADER = "epoch,train_loss,train_acc,test_acc,seconds"


@dataclass
class TrainingTrace:
    rows: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def append(self, row: EpochRecord):
        if not (0 <= row.train_acc <= 100 and 0 <= row.test_acc <= 100 and row.train_loss >= 0):
            raise InputError(f"trace row out of range: {row}")
        self.rows.append(row)

    @property
    def test_acc(self) -> list[float]:
        return [r.test_acc for r in self.rows]

    @property
    def train_acc(self) -> list[float]:
        return [r.train_acc for r in self.rows]

    @staticmethod
    def format_row(row: EpochRecord) -> str:
        return f"{row.epoch},{row.train_loss!r},{row.train_acc!r},{row.test_acc!r},{row.seconds:.3f}"

    def to_csv(self) -> str:
        return "\n".join([TRACE_HEADER] + [self.format_row(r) for r in self.rows]) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainingTrace":
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines or lines[0].strip() != TRACE_HEADER:
            raise InputError("trace CSV must start with header " + TRACE_HEADER)
        trace = cls()
        for lineno, line in enumerate(lines[1:], 2):
            try:
                e, loss, tr, te, sec = line.split(",")
                trace.rows.append(EpochRecord(int(e), float(loss), float(tr), float(te), float(sec)))
            except ValueError:
                raise InputError(f"trace CSV line {lineno}: malformed row {line!r}") from None
        return trace

    @classmethod
    def from_accuracies(cls, test_acc) -> "TrainingTrace":
        return cls([EpochRecord(i + 1, 0.0, float(a), float(a), 0.0) for i, a in enumerate(test_acc)])


class SpikeCache:
    """Frame-encodes streams on demand, keeping results when the set is small."""

    def __init__(self, streams, timesteps, hw, max_bytes=600 * 2**20):
        self.streams = list(streams)
        self.timesteps = timesteps
        self.hw = hw
        per = timesteps * 2 * hw[0] * hw[1]
        self._cache = {} if per * len(self.streams) <= max_bytes else None

    def _one(self, i):
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        f = encode_frames(self.streams[i], self.timesteps, *self.hw)
        if self._cache is not None:
            self._cache[i] = f
        return f

    def batch(self, idx):
        return np.stack([self._one(int(i)) for i in idx]).astype(np.float64)

    def labels(self, idx):
        return np.array([self.streams[int(i)].label for i in idx])


def _predict(net: Network, cache: SpikeCache, chunk: int):
    preds = []
    for start in range(0, len(cache.streams), chunk):
        idx = np.arange(start, min(start + chunk, len(cache.streams)))
        out, _ = forward(net, cache.batch(idx), "hard", keep=False)
        preds.append(np.atleast_1d(classify(out)))
    return np.concatenate(preds)


def evaluate(net: Network, samples, timesteps: int = 10, chunk: int = 50, cache: SpikeCache | None = None) -> float:
    """Percentage of ``samples`` whose predicted class equals their label."""
    if cache is None:
        samples = list(samples)
        if not samples:
            raise InputError("cannot evaluate on an empty sample set")
        cache = SpikeCache(samples, timesteps, net.config.input_shape[1:], max_bytes=0)
    elif not cache.streams:
        raise InputError("cannot evaluate on an empty sample set")
    pred = _predict(net, cache, chunk)
    return 100.0 * float(np.mean(pred == cache.labels(np.arange(len(cache.streams)))))


def train(net: Network, split: DatasetSplit, hp: Hyperparams, on_epoch=None, eval_chunk: int = 50,
          clock=time.perf_counter) -> TrainingTrace:
    """Minibatch STBP training with Adam.

    Each epoch visits the training set in an order drawn from a generator
    seeded by ``(seed, epoch)``, so the order does not depend on the batch
    size. The last partial batch is kept. Train accuracy is the running
    accuracy of the minibatch forward passes; test accuracy is measured after
    the epoch. ``on_epoch(row, net)`` is called after each epoch; a true
    return value stops training early.
    """
    if not split.train:
        raise InputError("training split is empty")
    if net.lif_params != hp.lif_params:
        raise ConfigError(f"network LIF parameters {net.lif_params} do not match hyperparameters")
    hw = net.config.input_shape[1:]
    train_set = SpikeCache(split.train, hp.timesteps, hw)
    test_set = SpikeCache(split.test, hp.timesteps, hw) if split.test else None
    n = len(split.train)
    opt = AdamState()
    trace = TrainingTrace()
    start = clock()
    for epoch in range(1, hp.epochs + 1):
        order = np.random.default_rng([hp.seed, epoch]).permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, lo in enumerate(range(0, n, hp.batch_size), 1):
            idx = order[lo:lo + hp.batch_size]
            x = train_set.batch(idx)
            labels = train_set.labels(idx)
            y = one_hot(labels, net.config.n_classes)
            out, record = forward(net, x, "hard", hp.surrogate_width)
            loss = stbp_loss(out, y)
            # NaN potentials compare false against the threshold and would
            # otherwise pass as silent neurons with a finite loss
            if not math.isfinite(loss):
                raise TrainingAborted(epoch, b, loss)
            if not np.all(np.isfinite(record.layers[-1].v)):
                raise TrainingAborted(epoch, b, loss, "non-finite membrane potential")
            grads = stbp_backward(record, y)
            adam_step(net.params, grads, opt, hp.learning_rate, hp.weight_decay, hp.decoupled_weight_decay)
            loss_sum += loss * len(idx)
            correct += int(np.sum(classify(out) == labels))
        if not all(np.all(np.isfinite(p)) for p in net.params.values()):
            raise TrainingAborted(epoch, b, float("nan"), "non-finite parameters")
        test_acc = evaluate(net, None, chunk=eval_chunk, cache=test_set) if test_set else 0.0
        row = EpochRecord(epoch, loss_sum / n, 100.0 * correct / n, test_acc, clock() - start)
        trace.append(row)
        log.info("epoch %d loss %.5f train %.2f%% test %.2f%%", epoch, row.train_loss,
                 row.train_acc, row.test_acc)
        if on_epoch is not None and on_epoch(row, net):
            break
    return trace
