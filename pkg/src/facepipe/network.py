"""Declarative network assembly, parameter accounting, forward/backward over
a layer stack, and checkpoint persistence.

The canonical stack is a 100x100 grayscale input through ten 3x3
convolutions (ReLU after each except the last), five pools (four max, one
average), dropout, and a single fully connected classifier head. The flattened
output of the average pool, taken before dropout, is the face embedding.

Checkpoint format (version 1, little-endian):

    bytes 0..6   magic b"FPCKPT\\n"
    bytes 7..10  format version, uint32
    bytes 11..14 header length N, uint32
    N bytes      JSON header: layer list, input shape, class count,
                 representation layer, dtype, mode, init seed, completed
                 epoch count, per-layer weight shapes, velocity flag
    payload      raw weight arrays in layer order, then (if flagged)
                 momentum velocity arrays in the same order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import (CheckpointFormatError, CheckpointShapeError,
                     CheckpointTruncatedError, CheckpointVersionError,
                     ShapeError)

_MAGIC = b"FPCKPT\n"
_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered (name, kind) layer list plus the head/representation contract."""

    layers: tuple[tuple[str, L.LayerKind], ...]
    input_shape: tuple[int, int, int] = (100, 100, 1)
    representation_layer: str = "Pool5"
    class_count: int = 10575

    def __post_init__(self):
        names = [n for n, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        if self.representation_layer not in names:
            raise ValueError(f"representation layer {self.representation_layer!r}"
                             " not in stack")
        rep = names.index(self.representation_layer)
        if rep + 2 != len(self.layers) - 1 \
                or not isinstance(self.layers[rep + 1][1], L.Dropout) \
                or not isinstance(self.layers[rep + 2][1], L.FullyConnected):
            raise ValueError("the representation layer must be followed by"
                             " exactly Dropout then FullyConnected")
        head = self.layers[-1][1]
        if head.out_dim != self.class_count:
            raise ValueError(f"classifier head emits {head.out_dim} classes,"
                             f" spec says {self.class_count}")
        self.activation_shapes()  # validates the whole chain

    def activation_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """(name, output shape) per layer; raises ShapeError on a bad chain."""
        cur: tuple[int, ...] = self.input_shape
        out = []
        for name, kind in self.layers:
            if isinstance(kind, L.FullyConnected) and len(cur) > 1:
                flat = int(np.prod(cur))
                if flat != kind.in_dim:
                    raise ShapeError(f"fc layer {name} input", axis=0,
                                     expected=kind.in_dim, actual=flat)
                cur = (flat,)
            cur = L.output_shape(kind, cur)
            out.append((name, cur))
        return out

    def embedding_dim(self) -> int:
        shapes = dict(self.activation_shapes())
        return int(np.prod(shapes[self.representation_layer]))


def build_canonical(class_count: int = 10575) -> NetworkSpec:
    """The full-scale 11-parameter-layer stack (10 conv + 1 fc)."""
    conv = lambda cin, cout: L.Convolution(3, 3, 1, cin, cout)
    stack: list[tuple[str, L.LayerKind]] = []
    widths = [(1, 32), (32, 64), (64, 64), (64, 128), (128, 96), (96, 192),
              (192, 128), (128, 256), (256, 160), (160, 320)]
    names = ["Conv11", "Conv12", "Conv21", "Conv22", "Conv31", "Conv32",
             "Conv41", "Conv42", "Conv51", "Conv52"]
    for i, (name, (cin, cout)) in enumerate(zip(names, widths)):
        stack.append((name, conv(cin, cout)))
        if name != "Conv52":  # the embedding feed stays dense, no ReLU
            stack.append((f"Relu{name[4:]}", L.ReLU()))
        if i % 2 == 1 and name != "Conv52":
            stack.append((f"Pool{(i + 1) // 2}", L.MaxPool(2, 2)))
    stack.append(("Pool5", L.AvgPool(7, 1)))
    stack.append(("Dropout", L.Dropout(0.4)))
    stack.append(("Fc6", L.FullyConnected(320, class_count)))
    return NetworkSpec(tuple(stack), (100, 100, 1), "Pool5", class_count)


def build_small(class_count: int, input_size: int = 25,
                blocks: tuple[tuple[int, int], ...] = ((8, 16), (16, 32)),
                dropout_rate: float = 0.4) -> NetworkSpec:
    """Scaled-down member of the same topology family for desk-scale work."""
    stack: list[tuple[str, L.LayerKind]] = []
    cin, side = 1, input_size
    for b, (c1, c2) in enumerate(blocks, start=1):
        stack.append((f"Conv{b}1", L.Convolution(3, 3, 1, cin, c1)))
        stack.append((f"Relu{b}1", L.ReLU()))
        stack.append((f"Conv{b}2", L.Convolution(3, 3, 1, c1, c2)))
        if b != len(blocks):
            stack.append((f"Relu{b}2", L.ReLU()))
        stack.append((f"Pool{b}", L.MaxPool(2, 2)))
        side = -(-(side - 2) // 2) + 1
        cin = c2
    rep = f"Pool{len(blocks) + 1}"
    stack.append((rep, L.AvgPool(side, 1)))
    stack.append(("Dropout", L.Dropout(dropout_rate)))
    stack.append(("Fc", L.FullyConnected(cin, class_count)))
    return NetworkSpec(tuple(stack), (input_size, input_size, 1), rep, class_count)


# --------------------------------------------------------------------------
# Parameter accounting

def count_params(spec: NetworkSpec) -> tuple[dict[str, int], int]:
    """Raw scalar count per parameterized layer and the total."""
    counts = {name: L.param_count(kind) for name, kind in spec.layers
              if L.weight_shape(kind) is not None}
    return counts, sum(counts.values())


def format_kilo(count: int) -> str:
    """Render a raw count in K units (K = 1024) at table precision."""
    k = count / 1024.0
    return f"{k:.2f}K" if k < 1.0 else f"{round(k)}K"


def depth(spec: NetworkSpec) -> int:
    """Number of parameterized layers."""
    return sum(1 for _, kind in spec.layers if L.weight_shape(kind) is not None)


# --------------------------------------------------------------------------
# Instantiated network

@dataclass
class LayerState:
    weights: np.ndarray | None = None
    grad: np.ndarray | None = None
    velocity: np.ndarray | None = None
    rng_seed: int = 0


@dataclass
class ForwardTrace:
    outputs: list[np.ndarray]
    caches: list[L.LayerCache]
    embedding: np.ndarray
    logits: np.ndarray


class Network:
    """A spec plus per-layer parameter state and a train/infer mode flag.

    Mutation (training) requires exclusive ownership; infer-mode forward on a
    network nobody mutates is safe from many threads.
    """

    def __init__(self, spec: NetworkSpec, states: dict[str, LayerState],
                 mode: str = "train", dtype=np.float64, init_seed: int = 0,
                 epoch: int = 0):
        self.spec = spec
        self.states = states
        self.mode = mode
        self.dtype = np.dtype(dtype)
        self.init_seed = init_seed
        self.epoch = epoch

    def forward_full(self, image: np.ndarray, dropout_seed=0) -> ForwardTrace:
        """Run the stack keeping every activation and backward cache."""
        if tuple(image.shape) != self.spec.input_shape:
            raise ShapeError("network input", expected=self.spec.input_shape,
                             actual=image.shape)
        act = np.asarray(image, dtype=self.dtype)
        outputs: list[np.ndarray] = []
        caches: list[L.LayerCache] = []
        embedding = None
        for name, kind in self.spec.layers:
            if isinstance(kind, L.FullyConnected) and act.ndim > 1:
                act = act.reshape(-1)
            w = self.states[name].weights if name in self.states else None
            act, cache = L.layer_forward(kind, act, w, mode=self.mode,
                                         seed=dropout_seed)
            outputs.append(act)
            caches.append(cache)
            if name == self.spec.representation_layer:
                embedding = act.reshape(-1)
        return ForwardTrace(outputs, caches, embedding, outputs[-1])

    def forward(self, image: np.ndarray,
                dropout_seed=0) -> tuple[np.ndarray, np.ndarray]:
        """(embedding, logits); the embedding is taken before dropout."""
        trace = self.forward_full(image, dropout_seed)
        return trace.embedding, trace.logits

    def backward(self, trace: ForwardTrace, grad_logits: np.ndarray,
                 grad_embedding: np.ndarray | None = None) -> None:
        """Accumulate weight gradients into each layer's state.

        `grad_embedding` (if given) is injected at the representation layer
        output, i.e. before the dropout head sees it.
        """
        names = [n for n, _ in self.spec.layers]
        rep = names.index(self.spec.representation_layer)
        g = grad_logits
        for i in range(len(names) - 1, -1, -1):
            g = g.reshape(trace.outputs[i].shape)
            if i == rep and grad_embedding is not None:
                g = g + grad_embedding.reshape(g.shape)
            dx, dw = L.layer_backward(trace.caches[i], g)
            if dw is not None:
                st = self.states[names[i]]
                if st.grad is None:
                    st.grad = np.zeros_like(st.weights)
                st.grad += dw
            g = dx

    def zero_grad(self) -> None:
        for st in self.states.values():
            if st.grad is not None:
                st.grad[...] = 0.0

    def copy(self) -> "Network":
        states = {}
        for name, st in self.states.items():
            states[name] = LayerState(
                None if st.weights is None else st.weights.copy(),
                None if st.grad is None else st.grad.copy(),
                None if st.velocity is None else st.velocity.copy(),
                st.rng_seed)
        return Network(self.spec, states, self.mode, self.dtype,
                       self.init_seed, self.epoch)


def init_weights(spec: NetworkSpec, seed: int, dtype=np.float64) -> Network:
    """He-style init: zero-mean Gaussian, std sqrt(2 / fan_in), per layer in
    stack order from a single seeded generator."""
    rng = np.random.default_rng(seed)
    states: dict[str, LayerState] = {}
    for name, kind in spec.layers:
        shape = L.weight_shape(kind)
        if shape is None:
            continue
        if isinstance(kind, L.Convolution):
            fan_in = kind.filter_h * kind.filter_w * kind.in_channels
        else:
            fan_in = kind.in_dim
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=shape).astype(dtype)
        states[name] = LayerState(weights=w, rng_seed=seed)
    return Network(spec, states, mode="train", dtype=dtype, init_seed=seed)


# --------------------------------------------------------------------------
# Spec <-> JSON (checkpoint header) and plain-text config

_KIND_TAGS = {L.Convolution: "conv", L.MaxPool: "maxpool", L.AvgPool: "avgpool",
              L.ReLU: "relu", L.Dropout: "dropout", L.FullyConnected: "fc"}


def _kind_to_obj(kind: L.LayerKind) -> dict:
    obj = {"type": _KIND_TAGS[type(kind)]}
    obj.update(kind.__dict__)
    return obj


def _kind_from_obj(obj: dict) -> L.LayerKind:
    tag = obj.pop("type")
    cls = {v: k for k, v in _KIND_TAGS.items()}[tag]
    return cls(**obj)


def spec_to_obj(spec: NetworkSpec) -> dict:
    return {
        "layers": [[name, _kind_to_obj(kind)] for name, kind in spec.layers],
        "input_shape": list(spec.input_shape),
        "representation_layer": spec.representation_layer,
        "class_count": spec.class_count,
    }


def spec_from_obj(obj: dict) -> NetworkSpec:
    layers = tuple((name, _kind_from_obj(dict(k))) for name, k in obj["layers"])
    return NetworkSpec(layers, tuple(obj["input_shape"]),
                       obj["representation_layer"], obj["class_count"])


def spec_to_text(spec: NetworkSpec) -> str:
    """One layer per line; inferred fields (channels, fc input) are omitted."""
    lines = [f"input {spec.input_shape[0]}x{spec.input_shape[1]}"
             f"x{spec.input_shape[2]}",
             f"classes {spec.class_count}",
             f"representation {spec.representation_layer}"]
    for name, kind in spec.layers:
        if isinstance(kind, L.Convolution):
            pad = "" if kind.same_padding else " valid"
            lines.append(f"{name} conv {kind.filter_h}x{kind.filter_w}"
                         f"/{kind.stride} {kind.out_channels}{pad}")
        elif isinstance(kind, L.MaxPool):
            mode = "" if kind.ceil_mode else " floor"
            lines.append(f"{name} maxpool {kind.window}x{kind.window}"
                         f"/{kind.stride}{mode}")
        elif isinstance(kind, L.AvgPool):
            lines.append(f"{name} avgpool {kind.window}x{kind.window}"
                         f"/{kind.stride}")
        elif isinstance(kind, L.ReLU):
            lines.append(f"{name} relu")
        elif isinstance(kind, L.Dropout):
            lines.append(f"{name} dropout {kind.rate}")
        elif isinstance(kind, L.FullyConnected):
            lines.append(f"{name} fc {kind.out_dim}")
    return "\n".join(lines) + "\n"


def _parse_geom(token: str) -> tuple[int, int, int]:
    size, stride = token.split("/")
    h, w = size.split("x")
    return int(h), int(w), int(stride)


def spec_from_text(text: str) -> NetworkSpec:
    input_shape = (100, 100, 1)
    class_count = 10575
    representation = "Pool5"
    raw: list[tuple[str, list[str]]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        if key == "input":
            dims = parts[1].split("x")
            input_shape = (int(dims[0]), int(dims[1]), int(dims[2]))
        elif key == "classes":
            class_count = int(parts[1])
        elif key == "representation":
            representation = parts[1]
        else:
            raw.append((key, parts[1:]))
    stack: list[tuple[str, L.LayerKind]] = []
    cur: tuple[int, ...] = input_shape
    for name, args in raw:
        tag = args[0]
        if tag == "conv":
            fh, fw, stride = _parse_geom(args[1])
            same = "valid" not in args[3:]
            kind: L.LayerKind = L.Convolution(fh, fw, stride, cur[2],
                                              int(args[2]), same)
        elif tag == "maxpool":
            win, _, stride = _parse_geom(args[1])
            kind = L.MaxPool(win, stride, ceil_mode="floor" not in args[2:])
        elif tag == "avgpool":
            win, _, stride = _parse_geom(args[1])
            kind = L.AvgPool(win, stride)
        elif tag == "relu":
            kind = L.ReLU()
        elif tag == "dropout":
            kind = L.Dropout(float(args[1]))
        elif tag == "fc":
            kind = L.FullyConnected(int(np.prod(cur)), int(args[1]))
        else:
            raise ValueError(f"unknown layer type {tag!r} for layer {name!r}")
        cur = L.output_shape(kind, (int(np.prod(cur)),)
                             if isinstance(kind, L.FullyConnected) else cur)
        stack.append((name, kind))
    return NetworkSpec(tuple(stack), input_shape, representation, class_count)


# --------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(net: Network, path) -> None:
    names = [n for n, k in net.spec.layers if L.weight_shape(k) is not None]
    has_velocity = any(net.states[n].velocity is not None for n in names)
    header = {
        "spec": spec_to_obj(net.spec),
        "shapes": {n: list(net.states[n].weights.shape) for n in names},
        "dtype": net.dtype.str,
        "mode": net.mode,
        "init_seed": net.init_seed,
        "epoch": net.epoch,
        "velocity": has_velocity,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(net.states[n].weights).tobytes())
        if has_velocity:
            for n in names:
                v = net.states[n].velocity
                if v is None:
                    v = np.zeros_like(net.states[n].weights)
                fh.write(np.ascontiguousarray(v).tobytes())


def load_checkpoint(path) -> Network:
    data = Path(path).read_bytes()
    if data[: len(_MAGIC)] != _MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    off = len(_MAGIC)
    if len(data) < off + 8:
        raise CheckpointTruncatedError(f"{path}: missing version/header length")
    version, hlen = struct.unpack_from("<II", data, off)
    if version != _VERSION:
        raise CheckpointVersionError(f"{path}: version {version},"
                                     f" expected {_VERSION}")
    off += 8
    if len(data) < off + hlen:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header: {exc}") from exc
    off += hlen
    try:
        spec = spec_from_obj(header["spec"])
    except (KeyError, TypeError, ValueError, ShapeError) as exc:
        raise CheckpointShapeError(f"{path}: inconsistent spec: {exc}") from exc
    dtype = np.dtype(header["dtype"])
    names = [n for n, k in spec.layers if L.weight_shape(k) is not None]
    for n, k in spec.layers:
        ws = L.weight_shape(k)
        if ws is not None and tuple(header["shapes"].get(n, ())) != ws:
            raise CheckpointShapeError(
                f"{path}: layer {n} stored shape {header['shapes'].get(n)}"
                f" disagrees with spec shape {ws}")
    sizes = [int(np.prod(L.weight_shape(dict(spec.layers)[n]))) for n in names]
    copies = 2 if header["velocity"] else 1
    expect = off + copies * sum(sizes) * dtype.itemsize
    if len(data) < expect:
        raise CheckpointTruncatedError(f"{path}: payload cut short"
                                       f" ({len(data)} < {expect} bytes)")
    if len(data) > expect:
        raise CheckpointFormatError(f"{path}: {len(data) - expect}"
                                    " trailing bytes")
    states: dict[str, LayerState] = {}
    kinds = dict(spec.layers)
    for n, size in zip(names, sizes):
        arr = np.frombuffer(data, dtype=dtype, count=size, offset=off)
        states[n] = LayerState(weights=arr.reshape(L.weight_shape(kinds[n])).copy(),
                               rng_seed=header["init_seed"])
        off += size * dtype.itemsize
    if header["velocity"]:
        for n, size in zip(names, sizes):
            arr = np.frombuffer(data, dtype=dtype, count=size, offset=off)
            states[n].velocity = arr.reshape(L.weight_shape(kinds[n])).copy()
            off += size * dtype.itemsize
    return Network(spec, states, header["mode"], dtype,
                   header["init_seed"], header["epoch"])
