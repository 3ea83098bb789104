"""Small convolutional encoder.

Stack of 3x3 stride-2 convolutions with ReLU, per-channel global average
pooling, a linear head and a sigmoid, so the feature vector lies in (0, 1)^k.
The last convolution's post-ReLU activations are returned with their graph
links so attention maps can be differentiated through them.

Checkpoint layout (all little-endian)::

    bytes 0..4    b"DIDA1"
    int32         input_channels
    int32         input_size
    int32         number of conv layers L
    int32 * L     conv widths
    int32         feature_dim
    int32         seed
    float64 ...   parameters in declaration order: for each conv layer the
                  kernel (out, in, 3, 3) then the bias (out,); then the head
                  weight (feature_dim, widths[-1]) and head bias (feature_dim,).
                  Every array is stored row-major.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"DIDA1"
KERNEL = 3
STRIDE = 2
PAD = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 3
    input_size: int = 32
    widths: tuple = (8, 16, 32)
    feature_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_channels < 1 or self.input_size < 1:
            raise ValueError("input_channels and input_size must be positive")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("widths must be a nonempty list of positive ints")
        if self.feature_dim < 8:
            raise ValueError(f"feature_dim must be >= 8, got {self.feature_dim}")
        if self.activation_size < 2:
            raise ValueError(
                f"input_size {self.input_size} with {len(self.widths)} stride-2 convs "
                f"leaves a {self.activation_size}x{self.activation_size} map; need >= 2")

    @property
    def activation_size(self) -> int:
        size = self.input_size
        for _ in self.widths:
            size = (size + 2 * PAD - KERNEL) // STRIDE + 1
        return size

    @property
    def num_maps(self) -> int:
        return self.widths[-1]


@dataclass
class EncoderOutput:
    features: Tensor      # f, length k, entries in (0, 1)
    activations: Tensor   # A, n x p x q, post-ReLU, graph-linked


class Encoder:
    def __init__(self, config: EncoderConfig, params: list | None = None):
        self.config = config
        self.names = []
        shapes = []
        in_c = config.input_channels
        for i, out_c in enumerate(config.widths):
            self.names += [f"conv{i}.weight", f"conv{i}.bias"]
            shapes += [(out_c, in_c, KERNEL, KERNEL), (out_c,)]
            in_c = out_c
        self.names += ["head.weight", "head.bias"]
        shapes += [(config.feature_dim, in_c), (config.feature_dim,)]
        self.shapes = shapes
        if params is None:
            params = _kaiming_uniform(shapes, config.seed)
        if len(params) != len(shapes) or any(np.shape(p) != s for p, s in zip(params, shapes)):
            raise ValueError("parameter shapes do not match the encoder config")
        self.params = [Tensor(p, requires_grad=True) for p in params]

    def __call__(self, image) -> EncoderOutput:
        return self.forward(image)

    def forward(self, image) -> EncoderOutput:
        cfg = self.config
        x = image if isinstance(image, Tensor) else Tensor(image)
        expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if x.shape != expected:
            raise ValueError(f"image shape {x.shape} does not match encoder input {expected}")
        for i in range(len(cfg.widths)):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            x = T.relu(T.conv2d(x, w, b, stride=STRIDE, padding=PAD))
        pooled = T.mean(x, axis=(1, 2))
        head_w, head_b = self.params[-2], self.params[-1]
        f = T.sigmoid(T.add(T.matmul(head_w, pooled), head_b))
        return EncoderOutput(features=f, activations=x)

    def state(self) -> list:
        return [p.data.copy() for p in self.params]

    def load_state(self, arrays) -> None:
        for p, a in zip(self.params, arrays, strict=True):
            if p.shape != np.shape(a):
                raise ValueError(f"shape mismatch {p.shape} vs {np.shape(a)}")
            p.data = np.array(a, dtype=np.float64)

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params]))


def init_encoder(config: EncoderConfig) -> Encoder:
    return Encoder(config)


def _kaiming_uniform(shapes, seed):
    # Kaiming-uniform for ReLU layers: bound = sqrt(6 / fan_in); biases start at zero.
    rng = np.random.default_rng(seed)
    out = []
    for shape in shapes:
        if len(shape) == 1:
            out.append(np.zeros(shape))
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        out.append(rng.uniform(-bound, bound, size=shape))
    return out


def save_checkpoint(encoder: Encoder, path) -> None:
    cfg = encoder.config
    ints = [cfg.input_channels, cfg.input_size, len(cfg.widths), *cfg.widths,
            cfg.feature_dim, cfg.seed]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(f"<{len(ints)}i", *ints))
        for p in encoder.params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Encoder:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise ValueError(f"{path}: not a DIDA1 checkpoint")
    off = 5

    def ints(n):
        nonlocal off
        if off + 4 * n > len(raw):
            raise ValueError(f"{path}: truncated header")
        vals = struct.unpack_from(f"<{n}i", raw, off)
        off += 4 * n
        return vals

    in_c, size, n_layers = ints(3)
    if not 0 < n_layers < 64:
        raise ValueError(f"{path}: implausible layer count {n_layers}")
    widths = ints(n_layers)
    feature_dim, seed = ints(2)
    config = EncoderConfig(in_c, size, tuple(widths), feature_dim, seed)
    probe = Encoder(config)
    params = []
    for shape in probe.shapes:
        n = int(np.prod(shape))
        if off + 8 * n > len(raw):
            raise ValueError(f"{path}: truncated parameter block")
        params.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return Encoder(config, params)
