"""The spiking U-Net: graph construction, forward evaluation and checkpoints.

Topology for depth ``d`` and base width ``b``::

    enc{i}:  conv3x3 -> LIF -> conv3x3 -> LIF -> (skip tap) -> maxpool   i = 1..d
    bott:    conv3x3 -> LIF -> conv3x3 -> LIF                             b * 2**d channels
    dec{i}:  deconv2x2 -> LIF -> concat(skip_i, .) -> conv3x3 -> LIF -> conv3x3 -> LIF
    out:     conv3x3 -> readout LIF (integrates only, never fires)

The RGB image is fed unchanged at every timestep and the prediction is the
readout membrane potential after the last timestep.
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as K
from .errors import CheckpointError, ConfigError, PreconditionError, ShapeError
from .neuron import LifConfig, lif_forward_sequence
from .tape import Tape

IN_CHANNELS = 3


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 4
    base_channels: int = 64
    timesteps: int = 5
    lif: LifConfig = field(default_factory=LifConfig)
    input_shape: tuple = (3, 64, 64)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        problems = self.problems()
        if problems:
            raise ConfigError("invalid network config: " + "; ".join(problems))

    def problems(self):
        out = []
        if int(self.depth) != self.depth or self.depth < 1:
            out.append(f"depth must be a positive integer, got {self.depth}")
        if self.base_channels < 1:
            out.append(f"base_channels must be >= 1, got {self.base_channels}")
        if self.timesteps < 1:
            out.append(f"timesteps must be >= 1, got {self.timesteps}")
        if len(self.input_shape) != 3 or self.input_shape[0] != IN_CHANNELS:
            out.append(f"input_shape must be (3, H, W), got {self.input_shape}")
        elif self.depth >= 1:
            step = 2 ** int(self.depth)
            _, h, w = self.input_shape
            if h < step or w < step or h % step or w % step:
                out.append(f"input {h}x{w} is not divisible by 2**depth = {step}")
        return out

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        lif = LifConfig(**d.pop("lif", {}))
        return cls(lif=lif, **d)


@dataclass(frozen=True)
class Layer:
    """One node of the layer graph.

    ``kind`` is one of input, conv, deconv, lif, pool, concat. Conv-type layers
    name the LIF layer they drive in ``lif``; LIF layers carry ``spiking``.
    """

    name: str
    kind: str
    inputs: tuple
    channels: int
    height: int
    width: int
    in_channels: int = 0
    k: int = 0
    stride: int = 1
    padding: int = 0
    spiking: bool = True
    lif: str = ""

    @property
    def shape(self):
        return (self.channels, self.height, self.width)

    @property
    def neurons(self):
        return self.channels * self.height * self.width


class LayerGraph:
    """Ordered layers plus the parameter store (name -> array, declaration order)."""

    def __init__(self, cfg, layers, params):
        self.cfg = cfg
        self.layers = list(layers)
        self.params = params
        self._by_name = {layer.name: layer for layer in self.layers}

    def __getitem__(self, name):
        return self._by_name[name]

    def __contains__(self, name):
        return name in self._by_name

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def conv_layers(self):
        """The 3x3 convolutions (19 at depth 4)."""
        return [layer for layer in self.layers if layer.kind == "conv"]

    def synaptic_layers(self):
        """Every layer with weights: convolutions and deconvolutions, in order."""
        return [layer for layer in self.layers if layer.kind in ("conv", "deconv")]

    def lif_layers(self):
        return [layer for layer in self.layers if layer.kind == "lif"]

    def spiking_layers(self):
        return [layer for layer in self.layers if layer.kind == "lif" and layer.spiking]

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def conv_params(self, layer):
        return K.ConvParams(self.params[layer.name + ".weight"], self.params[layer.name + ".bias"],
                            layer.stride, layer.padding)

    def decay(self, layer):
        return float(self.params[layer.name + ".decay"][0])

    def copy(self):
        return LayerGraph(self.cfg, self.layers, {k: v.copy() for k, v in self.params.items()})


def _layers_for(cfg):
    depth, base = cfg.depth, cfg.base_channels
    _, h, w = cfg.input_shape
    layers = [Layer("input", "input", (), IN_CHANNELS, h, w)]

    def add(name, kind, src, channels, hh, ww, **kw):
        layers.append(Layer(name, kind, tuple(src), channels, hh, ww, **kw))
        return name

    def conv_lif(prefix, suffix, src, cin, cout, hh, ww):
        conv = add(f"{prefix}.conv{suffix}", "conv", [src], cout, hh, ww,
                   in_channels=cin, k=3, padding=1, lif=f"{prefix}.lif{suffix}")
        return add(f"{prefix}.lif{suffix}", "lif", [conv], cout, hh, ww)

    src, cin = "input", IN_CHANNELS
    skips = {}
    for i in range(1, depth + 1):
        c = base * 2 ** (i - 1)
        src = conv_lif(f"enc{i}", 1, src, cin, c, h, w)
        src = conv_lif(f"enc{i}", 2, src, c, c, h, w)
        skips[i] = src
        h, w = h // 2, w // 2
        src = add(f"enc{i}.pool", "pool", [src], c, h, w)
        cin = c
    c = base * 2 ** depth
    src = conv_lif("bott", 1, src, cin, c, h, w)
    src = conv_lif("bott", 2, src, c, c, h, w)
    cin = c
    for i in range(depth, 0, -1):
        c = base * 2 ** (i - 1)
        h, w = h * 2, w * 2
        up = add(f"dec{i}.up", "deconv", [src], c, h, w, in_channels=cin, k=2, stride=2,
                 lif=f"dec{i}.lif_up")
        up = add(f"dec{i}.lif_up", "lif", [up], c, h, w)
        src = add(f"dec{i}.cat", "concat", [skips[i], up], 2 * c, h, w)
        src = conv_lif(f"dec{i}", 1, src, 2 * c, c, h, w)
        src = conv_lif(f"dec{i}", 2, src, c, c, h, w)
        cin = c
    add("out.conv", "conv", [src], IN_CHANNELS, h, w, in_channels=cin, k=3, padding=1, lif="out.lif")
    add("out.lif", "lif", ["out.conv"], IN_CHANNELS, h, w, spiking=False)
    return layers


def _audit(cfg, layers):
    """Check the encoder/decoder shape invariants; raise ConfigError on any violation."""
    _, h0, w0 = cfg.input_shape
    by_name = {layer.name: layer for layer in layers}
    problems = []
    for i in range(1, cfg.depth + 1):
        want = (cfg.base_channels * 2 ** (i - 1), h0 >> (i - 1), w0 >> (i - 1))
        for name in (f"enc{i}.lif2", f"dec{i}.lif2"):
            if by_name[name].shape != want:
                problems.append(f"{name} has shape {by_name[name].shape}, expected {want}")
    for layer in layers:
        for src in layer.inputs:
            prev = by_name[src]
            if layer.kind in ("conv", "deconv") and prev.channels != layer.in_channels:
                problems.append(f"{layer.name} expects {layer.in_channels} channels, {src} gives {prev.channels}")
    if by_name["out.lif"].shape != cfg.input_shape:
        problems.append("output shape differs from input shape")
    if problems:
        raise ConfigError("structural audit failed: " + "; ".join(problems))


def _param_shapes(layers):
    out = []
    for layer in layers:
        if layer.kind == "conv":
            w = (layer.channels, layer.in_channels, layer.k, layer.k)
        elif layer.kind == "deconv":
            w = (layer.in_channels, layer.channels, layer.k, layer.k)
        elif layer.kind == "lif":
            out.append((layer.name + ".decay", (1,)))
            continue
        else:
            continue
        out += [(layer.name + ".weight", w), (layer.name + ".bias", (layer.channels,))]
    return out


# 1/sqrt(fan_in): the usual default for conv layers. The larger He bound
# (sqrt 6) pushes more membranes far from threshold, where the surrogate
# gradient is tiny, and trains measurably slower.
INIT_SCALE = 1.0


def build(cfg, seed=0, dtype=np.float32, init_scale=INIT_SCALE):
    """Create a graph with fan-in scaled uniform weights, zero biases, beta = decay_init.

    Weights are drawn from U(-b, b) with ``b = init_scale / sqrt(fan_in)``.
    """
    if not isinstance(cfg, NetworkConfig):
        raise ConfigError(f"expected NetworkConfig, got {type(cfg).__name__}")
    layers = _layers_for(cfg)
    _audit(cfg, layers)
    rng = np.random.default_rng(seed)
    params = {}
    for layer in layers:
        if layer.kind == "conv":
            shape = (layer.channels, layer.in_channels, layer.k, layer.k)
            fan_in = layer.in_channels * layer.k * layer.k
        elif layer.kind == "deconv":
            shape = (layer.in_channels, layer.channels, layer.k, layer.k)
            fan_in = layer.in_channels * layer.k * layer.k // (layer.stride * layer.stride)
        elif layer.kind == "lif":
            params[layer.name + ".decay"] = np.full(1, cfg.lif.decay_param_init, dtype)
            continue
        else:
            continue
        bound = init_scale / math.sqrt(fan_in)
        params[layer.name + ".weight"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[layer.name + ".bias"] = np.zeros(layer.channels, dtype)
    return LayerGraph(cfg, layers, params)


def direct_code(image, timesteps):
    """Repeat ``image`` for ``timesteps`` steps as read-only views of the same data."""
    if int(timesteps) != timesteps or timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    image = K.check_tensor4(image, "image")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise PreconditionError("direct coding expects pixel values in [0, 1]")
    return np.broadcast_to(image, (int(timesteps),) + image.shape)


@dataclass
class SpikeTrace:
    """Spike counts per spiking LIF layer: ``counts[name]`` has shape (batch, T)."""

    timesteps: int
    counts: dict
    neurons: dict

    def __len__(self):
        return len(self.counts)


def _resolve_cfg(graph, cfg):
    if cfg is None:
        return graph.cfg
    g = graph.cfg
    if (cfg.depth, cfg.base_channels) != (g.depth, g.base_channels):
        raise ConfigError(f"config depth/width {cfg.depth}/{cfg.base_channels} does not match "
                          f"graph {g.depth}/{g.base_channels}")
    return cfg


def forward(graph, image, cfg=None, *, record=True, zero_skips=()):
    """Evaluate the network on a batch of images.

    Returns ``(output, tape, spike_trace)``. The graph is evaluated layer by
    layer with every timestep stacked on a leading axis; since no layer feeds
    back into an earlier one this equals stepping the whole graph once per
    timestep with persistent membrane state. ``cfg`` may override the
    timestep count and neuron settings. ``zero_skips`` lists encoder stages
    whose skip input to the decoder is replaced by zeros. With
    ``record=False`` no tape is kept and ``tape`` is None.
    """
    cfg = _resolve_cfg(graph, cfg)
    image = K.check_tensor4(image, "image")
    if image.shape[1:] != graph.cfg.input_shape:
        raise ConfigError(f"image shape {image.shape[1:]} does not match config input {graph.cfg.input_shape}")
    steps = cfg.timesteps
    coded = direct_code(image, steps)
    dtype = graph.dtype
    frame = np.ascontiguousarray(coded[0], dtype=dtype)
    n = frame.shape[0]
    tape = Tape() if record else None
    counts, neurons = {}, {}
    zeroed = {f"enc{i}.lif2" for i in zero_skips}
    # value = (array, static); static arrays have no time axis and repeat every step
    values = {}
    remaining = {}
    for layer in graph.layers:
        for src in layer.inputs:
            remaining[src] = remaining.get(src, 0) + 1

    def take(src):
        remaining[src] -= 1
        v = values[src]
        if remaining[src] == 0:
            del values[src]
        return v

    for layer in graph.layers:
        kind = layer.kind
        if kind == "input":
            values["input"] = (frame, True)
            if record:
                tape.record("input", "input")
            continue
        if kind in ("conv", "deconv"):
            x, static = take(layer.inputs[0])
            params = graph.conv_params(layer)
            op = K.conv2d_forward if kind == "conv" else K.deconv2d_forward
            if static:
                y = op(x, params)
            else:
                y = op(x.reshape((-1,) + x.shape[2:]), params)
                y = y.reshape((steps, n) + y.shape[1:])
            values[layer.name] = (y, static)
            if record:
                tape.record(kind, layer.name, layer.inputs, x=x, static=static)
        elif kind == "lif":
            x, static = take(layer.inputs[0])
            decay = graph.decay(layer)
            cur = (steps, x) if static else x
            vs, ss = lif_forward_sequence(cur, decay, cfg.lif, spiking=layer.spiking, dtype=dtype)
            if layer.spiking:
                counts[layer.name] = ss.reshape(steps, n, -1).sum(axis=2, dtype=np.float64).T
                neurons[layer.name] = layer.neurons
                values[layer.name] = (ss, False)
            else:
                values[layer.name] = (vs[-1], True)
            if record:
                tape.record("lif", layer.name, layer.inputs, vs=vs, spiking=layer.spiking)
        elif kind == "pool":
            x, _ = take(layer.inputs[0])
            y, idx = K.maxpool2x2(x.reshape((-1,) + x.shape[2:]))
            values[layer.name] = (y.reshape((steps, n) + y.shape[1:]), False)
            if record:
                tape.record("pool", layer.name, layer.inputs, pool=idx)
        elif kind == "concat":
            (a, _), (b, _) = take(layer.inputs[0]), take(layer.inputs[1])
            drop = layer.inputs[0] in zeroed
            if drop:
                a = np.zeros_like(a)
            y = K.concat_channels(a.reshape((-1,) + a.shape[2:]), b.reshape((-1,) + b.shape[2:]))
            values[layer.name] = (y.reshape((steps, n) + y.shape[1:]), False)
            if record:
                tape.record("concat", layer.name, layer.inputs, a_channels=a.shape[2], drop_a=drop)
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")

    output = values["out.lif"][0]
    if record:
        tape.finish("out.lif")
        tape.meta.update(timesteps=steps, batch=n, lif=cfg.lif)
    return output, tape, SpikeTrace(steps, counts, neurons)


def infer(graph, image, cfg=None):
    """Forward without recording a tape. Returns ``(output, spike_trace)``."""
    out, _, trace = forward(graph, image, cfg, record=False)
    return out, trace


# ---------------------------------------------------------------- checkpoints

MAGIC = b"UIESNNCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sII")


def serialize(graph):
    """Versioned binary checkpoint: magic, version, JSON header, float32 LE blobs, CRC32."""
    header = {
        "format": FORMAT_VERSION,
        "config": graph.cfg.to_dict(),
        "params": [[name, list(p.shape)] for name, p in graph.params.items()],
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(text)))
    buf.write(text)
    for p in graph.params.values():
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(data):
    data = bytes(data)
    if len(data) < _HEADER.size + 4:
        raise CheckpointError("checkpoint is truncated")
    magic, version, hlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    start = _HEADER.size + hlen
    if start > len(body):
        raise CheckpointError("checkpoint is truncated")
    try:
        header = json.loads(body[_HEADER.size:start].decode("utf-8"))
        cfg = NetworkConfig.from_dict(header["config"])
        specs = header["params"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    need = start + 4 * sum(math.prod(shape) for _, shape in specs)
    if need != len(body):
        raise CheckpointError(f"checkpoint body has {len(body)} bytes, expected {need}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    layers = _layers_for(cfg)
    expected = _param_shapes(layers)
    offset = start
    params = {}
    for name, shape in specs:
        size = math.prod(shape)
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float32)
        offset += 4 * size
    if [(k, v.shape) for k, v in params.items()] != expected:
        raise CheckpointError("checkpoint parameters do not match the network described by its header")
    return LayerGraph(cfg, layers, params)


def save(graph, path):
    with open(path, "wb") as fh:
        fh.write(serialize(graph))


def load(path):
    try:
        with open(path, "rb") as fh:
            return deserialize(fh.read())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def with_config(graph, **changes):
    """Same parameters under a modified config (timesteps, lif, input_shape).

    Depth and channel width fix the parameter shapes and cannot change; the
    network is fully convolutional, so any valid resolution works.
    """
    cfg = replace(graph.cfg, **changes)
    if (cfg.depth, cfg.base_channels) != (graph.cfg.depth, graph.cfg.base_channels):
        raise ShapeError("with_config cannot change depth or channel width")
    layers = graph.layers if cfg.input_shape == graph.cfg.input_shape else _layers_for(cfg)
    return LayerGraph(cfg, layers, graph.params)
