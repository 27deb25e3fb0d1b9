"""The convolutional spiking classifier and its unrolled forward pass.

Default layer stack for a ``[2, 100, 100]`` input::

    avgpool 4            -> [2, 25, 25]
    conv 2->32 k3 p1 s1  -> [32, 25, 25]   (LIF)
    avgpool 2            -> [32, 12, 12]
    conv 32->32 k3 p1 s1 -> [32, 12, 12]   (LIF)
    avgpool 2            -> [32, 6, 6]
    flatten              -> 1152
    dense 1152->512      -> 512            (LIF)
    dense 512->2         -> 2              (LIF)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor
from .errors import ConfigError
from .lif import LifParams, run_lif
from .tensor import ConvSpec, PoolSpec

PAPER_FLATTEN = 1152


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple[int, int, int] = (2, 100, 100)
    conv_channels: int = 32
    pool_windows: tuple[int, int, int] = (4, 2, 2)
    hidden: int = 512
    n_classes: int = 2
    kernel_size: int = 3
    padding: int = 1
    stride: int = 1
    # attach LIF neurons to the pooling layers as well
    spiking_pools: bool = False
    # multiplier on the U(-sqrt(1/fan_in), sqrt(1/fan_in)) weight bound
    init_gain: float = 4.0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["pool_windows"] = tuple(d["pool_windows"])
        return cls(**d)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "avgpool" | "conv" | "dense"
    name: str
    spec: object  # PoolSpec | ConvSpec | (out, in) tuple for dense
    spiking: bool
    in_shape: tuple
    out_shape: tuple


@dataclass
class Network:
    config: NetworkConfig
    layers: list[LayerSpec]
    params: dict[str, np.ndarray]
    lif_params: LifParams = field(default_factory=LifParams)

    def layer_shapes(self) -> list:
        """Output shape after each stage, with the flatten step listed as an int."""
        shapes = []
        for layer in self.layers:
            if layer.kind == "dense" and len(layer.in_shape) == 3:
                shapes.append(int(np.prod(layer.in_shape)))
            out = layer.out_shape
            shapes.append(out[0] if len(out) == 1 else list(out))
        return shapes

    @property
    def flatten_size(self) -> int:
        first_dense = next(l for l in self.layers if l.kind == "dense")
        return first_dense.spec[1]

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "Network":
        return Network(self.config, list(self.layers),
                       {k: v.copy() for k, v in self.params.items()}, self.lif_params)


def _layer_stack(config: NetworkConfig) -> list[LayerSpec]:
    if len(config.input_shape) != 3:
        raise ConfigError(f"input_shape must be [C, H, W], got {config.input_shape}")
    c, h, w = config.input_shape
    pools = [PoolSpec(p) for p in config.pool_windows]
    convs = [
        ConvSpec(c, config.conv_channels, config.kernel_size, config.padding, config.stride),
        ConvSpec(config.conv_channels, config.conv_channels, config.kernel_size,
                 config.padding, config.stride),
    ]
    layers = []
    shape = (c, h, w)
    for i in range(3):
        out = (shape[0],) + pools[i].output_hw(*shape[1:])
        layers.append(LayerSpec("avgpool", f"pool{i + 1}", pools[i], config.spiking_pools, shape, out))
        shape = out
        if i < 2:
            conv = convs[i]
            out = (conv.out_channels,) + conv.output_hw(*shape[1:])
            layers.append(LayerSpec("conv", f"conv{i + 1}", conv, True, shape, out))
            shape = out
    flat = int(np.prod(shape))
    layers.append(LayerSpec("dense", "fc1", (config.hidden, flat), True, shape, (config.hidden,)))
    layers.append(LayerSpec("dense", "fc2", (config.n_classes, config.hidden), True,
                            (config.hidden,), (config.n_classes,)))
    return layers


def build_network(input_shape=(2, 100, 100), lif_params: LifParams | None = None,
                  seed: int = 0, config: NetworkConfig | None = None) -> Network:
    """Build the layer stack with zero biases and weights drawn from
    ``U(-g * sqrt(1/fan_in), +g * sqrt(1/fan_in))``, ``g = config.init_gain``.

    With ``g = 1`` sparse event input leaves every layer silent and, for
    ``v_th >= surrogate width``, every gradient zero; the default gain makes all
    spiking layers fire at initialisation.
    """
    if config is None:
        config = NetworkConfig(input_shape=tuple(input_shape))
    elif tuple(input_shape) != config.input_shape:
        config = NetworkConfig(**{**asdict(config), "input_shape": tuple(input_shape)})
    if config.input_shape[0] != 2:
        raise ConfigError(f"input must have 2 polarity channels, got {config.input_shape[0]}")
    layers = _layer_stack(config)
    if replace(config, init_gain=1.0) == NetworkConfig(init_gain=1.0):
        flat = next(l for l in layers if l.kind == "dense").spec[1]
        assert flat == PAPER_FLATTEN, f"flatten size {flat} != {PAPER_FLATTEN}"

    rng = np.random.default_rng(seed)
    params = {}
    for layer in layers:
        if layer.kind == "conv":
            shape = layer.spec.weight_shape
            fan_in = shape[1] * shape[2] * shape[3]
            n_out = shape[0]
        elif layer.kind == "dense":
            shape = layer.spec
            fan_in, n_out = shape[1], shape[0]
        else:
            continue
        bound = config.init_gain * np.sqrt(1.0 / fan_in)
        params[f"{layer.name}.weight"] = rng.uniform(-bound, bound, size=shape)
        params[f"{layer.name}.bias"] = np.zeros(n_out)
    return Network(config, layers, params, lif_params or LifParams())


@dataclass
class LayerRecord:
    input: np.ndarray | None  # saved [T, N, ...] input for weight gradients
    v: np.ndarray | None      # membrane potentials, spiking layers only
    o: np.ndarray | None      # outputs after the LIF nonlinearity
    cols: np.ndarray | None = None  # unfolded conv patches


@dataclass
class ForwardRecord:
    net: Network
    mode: str
    a: float
    layers: list[LayerRecord]
    outputs: np.ndarray  # [T, N, classes]

    @property
    def timesteps(self) -> int:
        return self.outputs.shape[0]

    def __len__(self):
        return self.timesteps


def _apply(layer: LayerSpec, params, h, keep):
    if layer.kind == "avgpool":
        return tensor.avgpool_forward(h, layer.spec), None
    w, b = params[f"{layer.name}.weight"], params[f"{layer.name}.bias"]
    if layer.kind == "conv":
        if keep:
            return tensor.conv2d_forward(h, w, b, layer.spec, return_cols=True)
        return tensor.conv2d_forward(h, w, b, layer.spec), None
    return tensor.dense_forward(h.reshape(h.shape[:2] + (-1,)), w, b), None


def forward(net: Network, spikes, mode: str = "hard", a: float = 0.5, keep: bool = True):
    """Run the network over every timestep of ``spikes``.

    ``spikes`` is ``[T, 2, H, W]`` or batched ``[N, T, 2, H, W]``. Returns
    ``(outputs, record)`` where ``outputs`` is ``[T, classes]`` (or
    ``[N, T, classes]``). Each layer is evaluated for all timesteps at once;
    the LIF recurrence runs along the time axis inside the layer, which is
    equivalent to stepping the whole stack timestep by timestep.
    ``keep=False`` drops the tensors only needed for backpropagation.
    """
    x = np.asarray(spikes, dtype=np.float64)
    batched = x.ndim == 5
    if not batched:
        x = x[None]
    if x.ndim != 5 or x.shape[1] < 1:
        raise ConfigError(f"input must be [T, C, H, W] or [N, T, C, H, W], got {np.shape(spikes)}")
    if tuple(x.shape[2:]) != net.config.input_shape:
        raise ConfigError(f"input frame shape {x.shape[2:]} != network input {net.config.input_shape}")
    h = x.transpose(1, 0, 2, 3, 4)
    records = []
    for layer in net.layers:
        saved = h if layer.kind != "avgpool" and keep else None
        z, cols = _apply(layer, net.params, h, keep)
        if layer.spiking:
            v, o = run_lif(z, net.lif_params, mode, a)
            records.append(LayerRecord(saved, v, o, cols) if keep else LayerRecord(None, None, None))
            h = o
        else:
            records.append(LayerRecord(saved, None, None, cols))
            h = z
    record = ForwardRecord(net, mode, a, records, h)
    out = h.transpose(1, 0, 2)
    return (out if batched else out[0]), record


def spike_rates(outputs):
    outputs = np.asarray(outputs, dtype=np.float64)
    return outputs.sum(axis=-2) / outputs.shape[-2]


def classify(outputs):
    """Argmax of the time-averaged output rate; ties resolve to class 0.

    Accepts ``[T, classes]`` (returns an int) or ``[N, T, classes]``.
    """
    rates = spike_rates(outputs)
    pred = np.argmax(rates, axis=-1)  # first maximum wins
    return int(pred) if rates.ndim == 1 else pred


# -- checkpoints -------------------------------------------------------------

MAGIC = b"SNNCKPT\x00"
VERSION = 1


def save_checkpoint(net: Network, path) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header, float64 LE data.

    The header holds the network config, LIF parameters and a layer table of
    ``(name, shape)`` entries giving the order of the raw tensors that follow.
    """
    table = [{"name": k, "shape": list(v.shape)} for k, v in net.params.items()]
    header = json.dumps({
        "config": asdict(net.config),
        "lif": asdict(net.lif_params),
        "tensors": table,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for v in net.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 16:
        raise ConfigError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError:
        raise ConfigError(f"{path}: corrupt checkpoint header") from None
    config = NetworkConfig.from_dict(header["config"])
    net = build_network(config.input_shape, LifParams(**header["lif"]), 0, config)
    pos = 16 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        if pos + count * 8 > len(data):
            raise ConfigError(f"{path}: truncated data for tensor {entry['name']}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        if entry["name"] not in net.params or net.params[entry["name"]].shape != shape:
            raise ConfigError(f"{path}: tensor {entry['name']} {shape} does not match config")
        net.params[entry["name"]] = arr.astype(np.float64)
        pos += count * 8
    if pos != len(data):
        raise ConfigError(f"{path}: {len(data) - pos} trailing bytes")
    return net
