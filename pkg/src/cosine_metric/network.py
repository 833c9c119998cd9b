"""Feature encoders, parameter accounting and the CMCK checkpoint format.

Two encoders are provided:

* :class:`ResidualEncoder` - the 128x64 RGB re-identification network
  (two plain convolutions, max pooling, six pre-activation residual blocks,
  a 128-unit dense layer and optional l2 normalisation).
* :class:`MLPEncoder` - dense/ELU stacks for vector inputs, used for the
  fast synthetic experiments.

Parameters live in flat ``name -> ndarray`` dictionaries.  A forward pass
wraps them as graph constants, or uses caller-supplied parameter nodes when
gradients are wanted.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Mode, Node
from .errors import (
    MissingTensorError,
    ShapeError,
    TensorShapeMismatchError,
)
from .tensor import BinaryReader, pack_float32, pack_shape

PAPER_INPUT_SHAPE = (3, 128, 64)
PAPER_EMBEDDING_DIM = 128
PAPER_PARAMETER_COUNT = 2_800_864

# Output size column of the reference architecture table (channels, H, W).
REFERENCE_OUTPUT_SIZES = {
    "conv1": (32, 128, 64),
    "conv2": (32, 128, 64),
    "pool3": (32, 64, 32),
    "res4": (32, 64, 32),
    "res5": (32, 64, 32),
    "res6": (64, 32, 16),
    "res7": (64, 32, 16),
    "res8": (128, 16, 8),
    "res9": (128, 16, 8),
    "dense10": (128,),
    "l2norm": (128,),
}

# (name, out_channels, stride)
RESIDUAL_LAYOUT = (
    ("res4", 32, 1),
    ("res5", 32, 1),
    ("res6", 64, 2),
    ("res7", 64, 1),
    ("res8", 128, 2),
    ("res9", 128, 1),
)


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Encoder:
    """Common parameter/buffer bookkeeping shared by the encoders."""

    kind = "base"

    def __init__(self, final_l2: bool):
        self.final_l2 = final_l2
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        # parameter name -> layer label used in the count table
        self.layer_of: dict[str, str] = {}
        self.no_decay: set[str] = set()

    # -- construction helpers
    def _add(self, layer: str, name: str, value: np.ndarray, decay: bool = True) -> None:
        key = f"{layer}/{name}"
        self.params[key] = value
        self.layer_of[key] = layer
        if not decay:
            self.no_decay.add(key)

    def _add_bn(self, layer: str, prefix: str, channels: int) -> None:
        self._add(layer, f"{prefix}/gamma", np.ones(channels), decay=False)
        self._add(layer, f"{prefix}/beta", np.zeros(channels), decay=False)
        self.buffers[f"{layer}/{prefix}/running_mean"] = np.zeros(channels)
        self.buffers[f"{layer}/{prefix}/running_var"] = np.ones(channels)

    def _bn(self, x: Node, p, layer: str, prefix: str, mode: Mode) -> Node:
        key = f"{layer}/{prefix}"
        return ad.batchnorm(x, p[f"{key}/gamma"], p[f"{key}/beta"],
                            self.buffers[f"{key}/running_mean"],
                            self.buffers[f"{key}/running_var"], mode)

    def _bound(self, nodes: dict[str, Node] | None) -> dict[str, Node]:
        if nodes is None:
            return {k: ad.constant(v) for k, v in self.params.items()}
        return nodes

    # -- public surface
    @property
    def input_shape(self) -> tuple[int, ...]:
        raise NotImplementedError

    @property
    def embedding_dim(self) -> int:
        raise NotImplementedError

    def forward(self, x, mode: Mode = Mode.INFERENCE, rng: np.random.Generator | None = None,
                nodes: dict[str, Node] | None = None, trace: dict | None = None) -> Node:
        raise NotImplementedError

    def embed(self, x) -> np.ndarray:
        """Inference-mode embeddings as a plain array."""
        return self.forward(np.asarray(x, dtype=np.float64), Mode.INFERENCE).value

    def state(self) -> dict[str, np.ndarray]:
        out = {f"enc/{k}": v for k, v in self.params.items()}
        out.update({f"enc/{k}": v for k, v in self.buffers.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        """Copy matching ``enc/...`` tensors in; every expected name must be present."""
        for group in (self.params, self.buffers):
            for k, v in group.items():
                name = f"enc/{k}"
                if name not in tensors:
                    raise MissingTensorError(f"checkpoint is missing tensor {name!r}")
                got = np.asarray(tensors[name])
                if got.shape != v.shape:
                    raise TensorShapeMismatchError(
                        f"tensor {name!r}: checkpoint shape {got.shape}, encoder expects {v.shape}"
                    )
                v[...] = got

    def _check_input(self, x: Node) -> None:
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(
                f"encoder expects input (batch, {', '.join(map(str, self.input_shape))}), "
                f"got {x.shape}"
            )


class ResidualEncoder(Encoder):
    kind = "paper"

    def __init__(self, rng: np.random.Generator, final_l2: bool = True, dropout: float = 0.4):
        super().__init__(final_l2)
        self.dropout = dropout
        c_in = PAPER_INPUT_SHAPE[0]
        self._add("conv1", "w", _uniform_fan_in(rng, (32, c_in, 3, 3), c_in * 9))
        self._add("conv1", "b", np.zeros(32))
        self._add("conv2", "w", _uniform_fan_in(rng, (32, 32, 3, 3), 32 * 9))
        self._add("conv2", "b", np.zeros(32))
        channels = 32
        for name, out, stride in RESIDUAL_LAYOUT:
            self._add_bn(name, "bn1", channels)
            self._add(name, "conv1/w", _uniform_fan_in(rng, (out, channels, 3, 3), channels * 9))
            self._add_bn(name, "bn2", out)
            self._add(name, "conv2/w", _uniform_fan_in(rng, (out, out, 3, 3), out * 9))
            if out != channels or stride != 1:
                self._add(name, "proj/w", _uniform_fan_in(rng, (out, channels, 1, 1), channels))
            channels = out
        flat = channels * 16 * 8
        self._add("dense10", "w", _uniform_fan_in(rng, (flat, PAPER_EMBEDDING_DIM), flat))
        self._add("dense10", "b", np.zeros(PAPER_EMBEDDING_DIM))

    @property
    def input_shape(self):
        return PAPER_INPUT_SHAPE

    @property
    def embedding_dim(self):
        return PAPER_EMBEDDING_DIM

    def residual_block(self, x: Node, name: str, stride: int, mode: Mode, rng, p) -> Node:
        """Pre-activation block: BN-ELU-conv, BN-ELU-dropout-conv, plus skip."""
        pre = ad.elu(self._bn(x, p, name, "bn1", mode))
        h = ad.conv2d(pre, p[f"{name}/conv1/w"], stride=stride)
        h = ad.elu(self._bn(h, p, name, "bn2", mode))
        h = ad.dropout(h, self.dropout, mode, rng)
        h = ad.conv2d(h, p[f"{name}/conv2/w"])
        proj = f"{name}/proj/w"
        skip = ad.conv2d(pre, p[proj], stride=stride, padding=0) if proj in p else x
        return skip + h

    def forward(self, x, mode=Mode.INFERENCE, rng=None, nodes=None, trace=None):
        x = ad.constant(x)
        self._check_input(x)
        p = self._bound(nodes)
        record = (lambda k, v: trace.__setitem__(k, tuple(v.shape[1:]))) if trace is not None else (lambda k, v: None)
        h = ad.elu(ad.conv2d(x, p["conv1/w"], p["conv1/b"]))
        record("conv1", h)
        h = ad.elu(ad.conv2d(h, p["conv2/w"], p["conv2/b"]))
        record("conv2", h)
        h = ad.maxpool2d(h, window=3, stride=2)
        record("pool3", h)
        for name, _, stride in RESIDUAL_LAYOUT:
            h = self.residual_block(h, name, stride, mode, rng, p)
            record(name, h)
        h = ad.dense(ad.flatten(ad.elu(h)), p["dense10/w"], p["dense10/b"])
        record("dense10", h)
        if self.final_l2:
            h = ad.l2_normalize(h)
            record("l2norm", h)
        return h


class MLPEncoder(Encoder):
    """Dense layers with ELU in between; the last layer is the embedding."""

    kind = "toy"

    def __init__(self, widths: tuple[int, ...], rng: np.random.Generator, final_l2: bool = True):
        super().__init__(final_l2)
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.widths = tuple(int(w) for w in widths)
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self._add(f"fc{i}", "w", _uniform_fan_in(rng, (a, b), a))
            self._add(f"fc{i}", "b", np.zeros(b))

    @property
    def input_shape(self):
        return (self.widths[0],)

    @property
    def embedding_dim(self):
        return self.widths[-1]

    def forward(self, x, mode=Mode.INFERENCE, rng=None, nodes=None, trace=None):
        x = ad.constant(x)
        self._check_input(x)
        p = self._bound(nodes)
        h = x
        last = len(self.widths) - 2
        for i in range(last + 1):
            h = ad.dense(h, p[f"fc{i}/w"], p[f"fc{i}/b"])
            if i < last:
                h = ad.elu(h)
            if trace is not None:
                trace[f"fc{i}"] = tuple(h.shape[1:])
        if self.final_l2:
            h = ad.l2_normalize(h)
        return h


@dataclass(frozen=True)
class EncoderSpec:
    architecture: str = "toy"  # "paper" or "toy"
    widths: tuple[int, ...] = (32, 128, 128, 64)  # toy only: input, hidden..., embedding
    final_l2: bool = True
    dropout: float = 0.4

    def build(self, rng: np.random.Generator) -> Encoder:
        if self.architecture == "paper":
            return ResidualEncoder(rng, self.final_l2, self.dropout)
        if self.architecture == "toy":
            return MLPEncoder(self.widths, rng, self.final_l2)
        raise ValueError(f"unknown architecture {self.architecture!r}")


def build_paper_encoder(rng: np.random.Generator | None = None, final_l2: bool = True,
                        dropout: float = 0.4, verify: bool = True) -> ResidualEncoder:
    """Build the residual encoder; ``verify`` runs a probe batch through it and
    checks every layer's output size against the reference table."""
    enc = ResidualEncoder(rng if rng is not None else np.random.default_rng(0), final_l2, dropout)
    if verify:
        sizes = output_sizes(enc)
        for layer, expected in REFERENCE_OUTPUT_SIZES.items():
            if layer == "l2norm" and not final_l2:
                continue
            if sizes.get(layer) != expected:
                raise ShapeError(f"{layer}: output size {sizes.get(layer)}, expected {expected}")
    return enc


def output_sizes(encoder: Encoder, batch: int = 2) -> dict[str, tuple[int, ...]]:
    probe = np.random.default_rng(1).random((batch,) + tuple(encoder.input_shape))
    trace: dict[str, tuple[int, ...]] = {}
    encoder.forward(probe, Mode.INFERENCE, trace=trace)
    return trace


# -- parameter accounting ---------------------------------------------------

@dataclass
class ParameterCount:
    rows: list[tuple[str, str, tuple[int, ...], int]]  # layer, tensor, shape, count
    total: int
    reference: int | None = None

    def per_layer(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for layer, _, _, n in self.rows:
            out[layer] = out.get(layer, 0) + n
        return out

    def report(self) -> str:
        lines = [f"{'tensor':<28}{'shape':>22}{'count':>12}"]
        for _, name, shape, n in self.rows:
            lines.append(f"{name:<28}{'x'.join(map(str, shape)):>22}{n:>12,}")
        lines.append("")
        lines.append(f"{'layer':<28}{'':>22}{'count':>12}")
        for layer, n in self.per_layer().items():
            lines.append(f"{layer:<28}{'':>22}{n:>12,}")
        lines.append(f"{'total':<28}{'':>22}{self.total:>12,}")
        if self.reference:
            diff = self.total - self.reference
            lines.append(f"{'reference':<28}{'':>22}{self.reference:>12,}")
            lines.append(f"{'difference':<28}{'':>22}{diff:>+12,} ({100.0 * diff / self.reference:+.4f}%)")
            lines.append("")
            lines.append("layout-dependent tensors (not fixed by the reference table):")
            for label, n in self.assumption_breakdown().items():
                lines.append(f"  {label:<44}{n:>10,}")
        return "\n".join(lines)

    def assumption_breakdown(self) -> dict[str, int]:
        """Counts of tensor groups whose presence is a layout choice."""
        groups = {
            "batchnorm gamma/beta in residual blocks": 0,
            "biases of conv1/conv2": 0,
            "bias of dense10": 0,
            "1x1 projections on downsampling skips": 0,
        }
        for layer, name, _, n in self.rows:
            if name.endswith(("/gamma", "/beta")):
                groups["batchnorm gamma/beta in residual blocks"] += n
            elif name in ("conv1/b", "conv2/b"):
                groups["biases of conv1/conv2"] += n
            elif name == "dense10/b":
                groups["bias of dense10"] += n
            elif name.endswith("/proj/w"):
                groups["1x1 projections on downsampling skips"] += n
        return groups


def count_parameters(encoder: Encoder) -> ParameterCount:
    rows = [(encoder.layer_of[k], k, v.shape, int(v.size)) for k, v in encoder.params.items()]
    reference = PAPER_PARAMETER_COUNT if isinstance(encoder, ResidualEncoder) else None
    return ParameterCount(rows, sum(r[3] for r in rows), reference)


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"CMCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0

    @property
    def kappa(self) -> float | None:
        if "head/log_kappa" not in self.tensors:
            return None
        return float(np.exp(self.tensors["head/log_kappa"][0]))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQI", CHECKPOINT_VERSION, ckpt.iteration, len(ckpt.tensors))]
    for name, t in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t)
        parts += [struct.pack("<H", len(raw)), raw, pack_shape(arr.shape), pack_float32(arr)]
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = BinaryReader(data, "checkpoint")
    r.magic(CHECKPOINT_MAGIC)
    r.version(CHECKPOINT_VERSION)
    iteration, count = r.unpack("<QI")
    tensors = {}
    for _ in range(count):
        (length,) = r.unpack("<H")
        name = r.take(length).decode("utf-8")
        tensors[name] = r.float32s(r.shape()).astype(np.float64)
    r.finish()
    return Checkpoint(tensors, int(iteration))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def encoder_from_checkpoint(ckpt: Checkpoint) -> Encoder:
    """Rebuild the encoder described by a checkpoint's tensor names and shapes."""
    t = ckpt.tensors
    final_l2 = bool(t.get("meta/final_l2", np.ones(1))[0])
    if "enc/conv1/w" in t:
        enc: Encoder = ResidualEncoder(np.random.default_rng(0), final_l2)
    else:
        widths = []
        i = 0
        while f"enc/fc{i}/w" in t:
            w = t[f"enc/fc{i}/w"]
            if not widths:
                widths.append(w.shape[0])
            widths.append(w.shape[1])
            i += 1
        if not widths:
            raise MissingTensorError("checkpoint holds no encoder tensors")
        enc = MLPEncoder(tuple(widths), np.random.default_rng(0), final_l2)
    enc.load_state(t)
    return enc


def head_from_checkpoint(ckpt: Checkpoint):
    from .losses import CosineSoftmaxHead, StandardSoftmaxHead

    t = ckpt.tensors
    if "head/log_kappa" in t:
        return CosineSoftmaxHead(t["head/weights"].copy(), t["head/log_kappa"].copy())
    if "head/bias" in t:
        return StandardSoftmaxHead(t["head/weights"].copy(), t["head/bias"].copy())
    return None


def make_checkpoint(encoder: Encoder, head=None, iteration: int = 0) -> Checkpoint:
    tensors = {k: v.copy() for k, v in encoder.state().items()}
    if head is not None:
        tensors.update({f"head/{k}": v.copy() for k, v in head.params.items()})
    tensors["meta/final_l2"] = np.array([1.0 if encoder.final_l2 else 0.0])
    return Checkpoint(tensors, iteration)
