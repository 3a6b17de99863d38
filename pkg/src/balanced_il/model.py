"""Multilayer perceptron with a class-expandable linear head."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ShapeError

CHECKPOINT_MAGIC = b"BILCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    weight: Tensor  # in_dim x out_dim
    bias: Tensor  # out_dim
    relu: bool

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def _as_batch(batch, input_dim: int) -> np.ndarray:
    x = batch.values if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ShapeError(f"expected a batch of shape [B, {input_dim}], got {x.shape}")
    return x


def _run_layers(layers: Sequence[tuple], x) -> Tensor:
    h = x
    for weight, bias, act in layers:
        h = ad.add_rowwise(ad.matmul(h, weight), bias)
        if act:
            h = ad.relu(h)
    return h


class ClassifierModel:
    """Feature extractor (relu MLP) followed by a linear head of width N_t.

    ``hidden=()`` gives the identity extractor: the head acts on the inputs.
    """

    def __init__(
        self,
        input_dim: int,
        num_classes: int,
        hidden: Sequence[int] = (64, 64),
        seed: int = 0,
        init_scale: float | None = None,
    ):
        if input_dim < 1 or num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        prev = input_dim
        for width in hidden:
            bound = np.sqrt(6.0 / prev)  # He-uniform
            w = rng.uniform(-bound, bound, size=(prev, width))
            self.layers.append(Layer(Tensor(w, True), Tensor(np.zeros(width), True), True))
            prev = width
        scale = 1.0 / np.sqrt(prev) if init_scale is None else init_scale
        w = rng.uniform(-scale, scale, size=(prev, num_classes))
        self.layers.append(Layer(Tensor(w, True), Tensor(np.zeros(num_classes), True), False))

    @property
    def head(self) -> Layer:
        return self.layers[-1]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.head.in_dim

    @property
    def num_classes(self) -> int:
        return self.head.out_dim

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, batch, params: Sequence[Tensor] | None = None) -> Tensor:
        """Logits over every class learned so far.

        ``params`` substitutes a parameter list laid out like
        :meth:`parameters`; the trainer uses it for virtual updates.
        """
        x = _as_batch(batch, self.input_dim)
        params = self.parameters() if params is None else list(params)
        if len(params) != 2 * len(self.layers):
            raise ShapeError("parameter list does not match the layer layout")
        triples = [
            (params[2 * i], params[2 * i + 1], layer.relu) for i, layer in enumerate(self.layers)
        ]
        return _run_layers(triples, x)

    def extract_features(self, batch) -> Tensor:
        """Penultimate activations; never recorded on a tape."""
        x = _as_batch(batch, self.input_dim)
        triples = [(l.weight.values, l.bias.values, l.relu) for l in self.layers[:-1]]
        return Tensor(_run_layers(triples, Tensor(x)).values)

    def expand_head(self, k_new: int, init_scale: float | None = None, seed: int = 0) -> None:
        """Append ``k_new`` output columns; existing columns are untouched."""
        if k_new < 1:
            raise ValueError(f"k_new must be >= 1, got {k_new}")
        scale = 1.0 / np.sqrt(self.feature_dim) if init_scale is None else init_scale
        rng = np.random.default_rng(seed)
        new_w = rng.uniform(-scale, scale, size=(self.feature_dim, k_new)) if scale > 0 else (
            np.zeros((self.feature_dim, k_new))
        )
        head = self.head
        head.weight = Tensor(np.concatenate([head.weight.values, new_w], axis=1), True)
        head.bias = Tensor(np.concatenate([head.bias.values, np.zeros(k_new)]), True)

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot(self)

    def state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeError("state does not match the layer layout")
        for p, a in zip(params, arrays):
            if p.shape != np.shape(a):
                raise ShapeError(f"state array shape {np.shape(a)} != {p.shape}")
            p.values = np.array(a, dtype=np.float64)

    # -- checkpoint ---------------------------------------------------------

    def save(self, path) -> None:
        """Write the flat little-endian checkpoint layout.

        magic(8) | version u32 | layer count u32 | per layer:
        in_dim u32, out_dim u32, relu u8, weight f64[in*out] row-major, bias f64[out]
        """
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(self.layers)))
            for layer in self.layers:
                fh.write(struct.pack("<IIB", layer.in_dim, layer.out_dim, int(layer.relu)))
                fh.write(np.ascontiguousarray(layer.weight.values, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(layer.bias.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        data = Path(path).read_bytes()
        if data[:8] != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        version, n_layers = struct.unpack_from("<II", data, 8)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        layers = []
        try:
            for _ in range(n_layers):
                rows, cols, act = struct.unpack_from("<IIB", data, pos)
                pos += 9
                w = np.frombuffer(data, "<f8", rows * cols, pos).reshape(rows, cols)
                pos += 8 * rows * cols
                b = np.frombuffer(data, "<f8", cols, pos)
                pos += 8 * cols
                layers.append(Layer(Tensor(w, True), Tensor(b, True), bool(act)))
        except (struct.error, ValueError) as exc:
            raise FormatError(f"{path}: truncated checkpoint") from exc
        if pos != len(data):
            raise FormatError(f"{path}: trailing bytes in checkpoint")
        model = cls.__new__(cls)
        model.layers = layers
        return model


class ModelSnapshot:
    """Frozen copy of a model's parameters (the previous-step teacher)."""

    def __init__(self, model: ClassifierModel):
        self._layers = []
        for layer in model.layers:
            w, b = layer.weight.values.copy(), layer.bias.values.copy()
            w.flags.writeable = False
            b.flags.writeable = False
            self._layers.append((w, b, layer.relu))
        self.input_dim = model.input_dim
        self.num_classes = model.num_classes

    def forward(self, batch) -> Tensor:
        x = _as_batch(batch, self.input_dim)
        return Tensor(_run_layers(self._layers, Tensor(x)).values)

    def extract_features(self, batch) -> Tensor:
        x = _as_batch(batch, self.input_dim)
        return Tensor(_run_layers(self._layers[:-1], Tensor(x)).values)
