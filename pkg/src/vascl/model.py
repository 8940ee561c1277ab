"""Encoder ``f`` and projection head ``h``, plus the checkpoint container.

The encoder is a small MLP standing in for a sentence encoder; with zero
layers it is the identity, which lets the head be trained over frozen,
precomputed embeddings. The head is always two affine layers.
"""

from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc

CKPT_MAGIC = b"VSCL"
CKPT_VERSION = 1
_ACT_CODES = {"linear": 0, "relu": 1, "tanh": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}
_ROLE_ENCODER, _ROLE_HEAD = 0, 1


class DegenerateViewsWarning(UserWarning):
    """Both dropout views coincide, so the positive pair is trivial."""


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        self.weight = nc.as_matrix(self.weight, name="weight")
        self.bias = nc.as_matrix(self.bias, name="bias")
        if self.bias.shape != (1, self.weight.shape[1]):
            raise nc.ShapeError(f"bias {self.bias.shape} does not fit weight {self.weight.shape}")
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ModelParams:
    """Trainable state: encoder layers, two head layers, dropout rate.

    The head nonlinearity sits between its two affine maps and is stored as
    the first head layer's activation.
    """

    encoder: List[Layer]
    head: List[Layer]
    dropout: float = 0.1
    input_dim: Optional[int] = None

    def __post_init__(self):
        if len(self.head) != 2:
            raise ValueError(f"projection head must have exactly 2 layers, got {len(self.head)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.encoder:
            self.input_dim = self.encoder[0].in_dim
            dims = [layer.in_dim for layer in self.encoder[1:]]
            outs = [layer.out_dim for layer in self.encoder[:-1]]
            if dims != outs:
                raise nc.ShapeError(f"encoder layer dims do not chain: outs {outs} vs ins {dims}")
        elif self.input_dim is None:
            self.input_dim = self.head[0].in_dim
        if self.head[0].in_dim != self.embed_dim:
            raise nc.ShapeError(f"head input {self.head[0].in_dim} != encoder output {self.embed_dim}")
        if self.head[1].in_dim != self.head[0].out_dim:
            raise nc.ShapeError("head layers do not chain")
        if self.head[1].activation != "linear":
            raise ValueError("second head layer must be linear")

    @property
    def embed_dim(self) -> int:
        return self.encoder[-1].out_dim if self.encoder else self.input_dim

    @property
    def out_dim(self) -> int:
        return self.head[1].out_dim

    def arrays(self) -> Dict[str, np.ndarray]:
        """Name -> array view of every trainable tensor (shared, not copied)."""
        out = {}
        for k, layer in enumerate(self.encoder):
            out[f"encoder.{k}.weight"] = layer.weight
            out[f"encoder.{k}.bias"] = layer.bias
        for k, layer in enumerate(self.head):
            out[f"head.{k}.weight"] = layer.weight
            out[f"head.{k}.bias"] = layer.bias
        return out

    def groups(self) -> Dict[str, str]:
        return {name: name.split(".", 1)[0] for name in self.arrays()}

    def copy(self) -> "ModelParams":
        def dup(layers):
            return [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in layers]

        return ModelParams(dup(self.encoder), dup(self.head), self.dropout, self.input_dim)

    def on_tape(self, tape: nc.Tape, trainable: bool = True) -> "TapedParams":
        nodes = {name: tape.leaf(arr, requires_grad=trainable, name=name) for name, arr in self.arrays().items()}
        return TapedParams(self, nodes)


@dataclass
class TapedParams:
    params: ModelParams
    nodes: Dict[str, nc.Node]

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: node.grad for name, node in self.nodes.items() if node.grad is not None}


def init_params(
    input_dim: int,
    encoder_dims: Sequence[int] = (64, 64),
    head_out: int = 128,
    activation: str = "tanh",
    head_activation: str = "relu",
    output_activation: Optional[str] = None,
    dropout: float = 0.1,
    rng: Optional[np.random.Generator] = None,
) -> ModelParams:
    """Glorot-uniform weights, zero biases.

    ``encoder_dims`` empty gives the identity encoder; the head is then
    ``(input_dim x input_dim, input_dim x head_out)``. ``output_activation``
    overrides the last encoder layer's nonlinearity.
    """
    rng = rng if rng is not None else np.random.default_rng(0)

    def glorot(n_in, n_out):
        limit = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-limit, limit, size=(n_in, n_out))

    encoder = []
    prev = input_dim
    for k, width in enumerate(encoder_dims):
        act = output_activation if output_activation and k == len(encoder_dims) - 1 else activation
        encoder.append(Layer(glorot(prev, width), np.zeros((1, width)), act))
        prev = width
    d = prev
    head = [
        Layer(glorot(d, d), np.zeros((1, d)), head_activation),
        Layer(glorot(d, head_out), np.zeros((1, head_out)), "linear"),
    ]
    return ModelParams(encoder, head, dropout, input_dim)


def identity_encoder(dims: Sequence[int], activation: str = "linear") -> List[Layer]:
    """Encoder layers whose weights are identity matrices."""
    return [Layer(np.eye(d), np.zeros((1, d)), activation) for d in dims]


def dropout_masks(params: ModelParams, n_rows: int, rng: Optional[np.random.Generator]) -> List[np.ndarray]:
    """One inverted-dropout mask per encoder layer input; empty in eval mode."""
    if rng is None or params.dropout == 0.0:
        return []
    return [nc.dropout_mask((n_rows, layer.in_dim), params.dropout, rng) for layer in params.encoder]


def encode_on_tape(tp: TapedParams, x: nc.Node, masks: Sequence[np.ndarray] = ()) -> nc.Node:
    params = tp.params
    if x.shape[1] != params.input_dim:
        raise nc.ShapeError(f"input dim {x.shape[1]} != model input dim {params.input_dim}")
    h = x
    for k, layer in enumerate(params.encoder):
        if masks:
            h = nc.apply_mask(h, masks[k])
        h = nc.affine(h, tp.nodes[f"encoder.{k}.weight"], tp.nodes[f"encoder.{k}.bias"])
        h = nc.ACTIVATIONS[layer.activation](h)
    return h


def project_on_tape(tp: TapedParams, e: nc.Node) -> nc.Node:
    params = tp.params
    if e.shape[1] != params.embed_dim:
        raise nc.ShapeError(f"embedding dim {e.shape[1]} != head input dim {params.embed_dim}")
    h = nc.affine(e, tp.nodes["head.0.weight"], tp.nodes["head.0.bias"])
    h = nc.ACTIVATIONS[params.head[0].activation](h)
    return nc.affine(h, tp.nodes["head.1.weight"], tp.nodes["head.1.bias"])


def encode(params: ModelParams, inputs, dropout_rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Encoder outputs ``E``; ``dropout_rng=None`` is eval mode (deterministic)."""
    tape = nc.Tape()
    x = tape.leaf(inputs, name="inputs")
    tp = params.on_tape(tape, trainable=False)
    return encode_on_tape(tp, x, dropout_masks(params, x.shape[0], dropout_rng)).value


def project(params: ModelParams, embeddings) -> np.ndarray:
    tape = nc.Tape()
    tp = params.on_tape(tape, trainable=False)
    return project_on_tape(tp, tape.leaf(embeddings, name="embeddings")).value


def split_rng(rng: np.random.Generator, n: int = 2) -> List[np.random.Generator]:
    """Independent child streams of ``rng``."""
    return list(rng.spawn(n))


@dataclass
class TwoViews:
    """Encoder and head outputs for two dropout passes over one batch (row-aligned)."""

    E: nc.Node
    E2: nc.Node
    Z: nc.Node
    Z2: nc.Node
    masks: Tuple[List[np.ndarray], List[np.ndarray]] = field(default=((), ()))


def forward_twice_on_tape(tp: TapedParams, x: nc.Node, rng: np.random.Generator) -> TwoViews:
    params = tp.params
    if params.dropout == 0.0 or not params.encoder:
        warnings.warn(
            "dropout is disabled, so both views coincide and the positive pair is degenerate",
            DegenerateViewsWarning,
            stacklevel=2,
        )
    r1, r2 = split_rng(rng)
    m1 = dropout_masks(params, x.shape[0], r1)
    m2 = dropout_masks(params, x.shape[0], r2)
    e1 = encode_on_tape(tp, x, m1)
    e2 = encode_on_tape(tp, x, m2)
    return TwoViews(e1, e2, project_on_tape(tp, e1), project_on_tape(tp, e2), (m1, m2))


def forward_twice(params: ModelParams, inputs, rng: np.random.Generator):
    """``(E, E', Z, Z')`` from two independent dropout passes."""
    tape = nc.Tape()
    tp = params.on_tape(tape, trainable=False)
    views = forward_twice_on_tape(tp, tape.leaf(inputs, name="inputs"), rng)
    return views.E.value, views.E2.value, views.Z.value, views.Z2.value


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout (little-endian):
#   magic "VSCL" | version u16 | layer count u32 | input dim u32 | dropout f64
#   per layer: role u8 (0 encoder, 1 head) | activation u8 | rows u32 | cols u32
#              | weight f64[rows*cols] row-major | bias f64[cols]

_HEADER = struct.Struct("<4sHIId")
_LAYER = struct.Struct("<BBII")


def dump_checkpoint(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    layers = [(_ROLE_ENCODER, l) for l in params.encoder] + [(_ROLE_HEAD, l) for l in params.head]
    buf.write(_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(layers), params.input_dim, params.dropout))
    for role, layer in layers:
        rows, cols = layer.weight.shape
        buf.write(_LAYER.pack(role, _ACT_CODES[layer.activation], rows, cols))
        buf.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return buf.getvalue()


def parse_checkpoint(blob: bytes) -> ModelParams:
    if len(blob) < _HEADER.size:
        raise CheckpointFormatError("checkpoint truncated before header end")
    magic, version, n_layers, input_dim, dropout = _HEADER.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    off = _HEADER.size
    encoder, head = [], []
    for k in range(n_layers):
        if off + _LAYER.size > len(blob):
            raise CheckpointFormatError(f"layer {k}: truncated descriptor")
        role, act, rows, cols = _LAYER.unpack_from(blob, off)
        off += _LAYER.size
        n = rows * cols + cols
        if off + 8 * n > len(blob):
            raise CheckpointFormatError(f"layer {k}: truncated data")
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        if act not in _ACT_NAMES or role not in (_ROLE_ENCODER, _ROLE_HEAD):
            raise CheckpointFormatError(f"layer {k}: bad role/activation code")
        try:
            layer = Layer(data[: rows * cols].reshape(rows, cols), data[rows * cols:].reshape(1, cols), _ACT_NAMES[act])
        except ValueError as exc:
            raise CheckpointFormatError(f"layer {k}: {exc}") from exc
        (encoder if role == _ROLE_ENCODER else head).append(layer)
    if off != len(blob):
        raise CheckpointFormatError(f"{len(blob) - off} trailing bytes")
    try:
        return ModelParams(encoder, head, dropout, input_dim)
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from exc


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(dump_checkpoint(params))


def load_checkpoint(path) -> ModelParams:
    return parse_checkpoint(Path(path).read_bytes())
