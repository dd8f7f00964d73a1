"""
VGG-family networks with a replaceable classification head, the freeze
rule, the MVW1 weights format and the ImageNet benchmark catalog.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .nncore import DTYPE, Layer, conv_layer, dense_layer

# Number of 3x3 conv layers in each of the five pooled blocks, and their widths.
VGG_BLOCKS: Dict[str, Tuple[int, ...]] = {
    "vgg16": (2, 2, 3, 3, 3),
    "vgg19": (2, 2, 4, 4, 4),
}
VGG_WIDTHS = (64, 128, 256, 512, 512)

DEFAULT_INPUT_SIDE = 224
DEFAULT_INPUT_CHANNELS = 3
DEFAULT_HEAD_UNITS = 256
DEFAULT_DROPOUT = 0.5


@dataclass
class ModelSpec:
    name: str
    layers: List[Layer]
    freeze_fraction: float
    class_count: int
    input_side: int
    input_channels: int

    @property
    def conv_layer_count(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == "conv")

    @property
    def conv_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv"]

    @property
    def frozen_conv_count(self) -> int:
        return sum(1 for i in self.conv_indices if self.layers[i].frozen)

    def named_params(self) -> Iterator[Tuple[str, Layer, str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for pname in sorted(layer.params):
                yield f"layer{i}.{pname}", layer, pname, layer.params[pname]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: arr for name, _, _, arr in self.named_params()}

    def backbone_names(self) -> List[str]:
        """Parameter names of the convolutional feature extractor."""
        return [name for name, layer, _, _ in self.named_params() if layer.kind == "conv"]


def frozen_count(freeze_fraction: float, conv_layer_count: int) -> int:
    """round-half-up(fraction * count), clamped to [0, count]."""
    exact = Decimal(repr(float(freeze_fraction))) * conv_layer_count
    n = int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return max(0, min(conv_layer_count, n))


def apply_freeze(model: ModelSpec, freeze_fraction: float) -> ModelSpec:
    """Freeze the earliest convolutional layers; everything else is trainable."""
    if not 0.0 <= freeze_fraction <= 1.0:
        raise ValueError(f"freeze_fraction must lie in [0, 1], got {freeze_fraction}")
    n_frozen = frozen_count(freeze_fraction, model.conv_layer_count)
    conv = set(model.conv_indices[:n_frozen])
    for i, layer in enumerate(model.layers):
        layer.frozen = i in conv
    model.freeze_fraction = freeze_fraction
    return model


def build_sequential(name: str, blocks: Sequence[Sequence[int]], class_count: int,
                     freeze_fraction: float = 0.0, input_side: int = DEFAULT_INPUT_SIDE,
                     input_channels: int = DEFAULT_INPUT_CHANNELS,
                     head_units: int = DEFAULT_HEAD_UNITS, dropout: float = DEFAULT_DROPOUT,
                     seed: int = 0) -> ModelSpec:
    """VGG-style stack: each block is a list of conv widths followed by a 2x2 max-pool.

    Head is flatten -> dense(head_units) -> relu -> dropout -> dense(class_count) -> softmax.
    ``head_units=0`` drops the hidden dense layer.
    """
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    rng = np.random.default_rng(seed)
    layers: List[Layer] = []
    ch, side = input_channels, input_side
    for widths in blocks:
        for width in widths:
            layers.append(conv_layer(ch, width, rng))
            layers.append(Layer("relu"))
            ch = width
        layers.append(Layer("maxpool", hyper={"size": 2}))
        side //= 2
        if side == 0:
            raise ValueError(f"input side {input_side} too small for {len(blocks)} pooled blocks")
    layers.append(Layer("flatten"))
    features = ch * side * side
    if head_units:
        layers += [dense_layer(features, head_units, rng), Layer("relu"),
                   Layer("dropout", hyper={"rate": dropout})]
        features = head_units
    layers += [dense_layer(features, class_count, rng), Layer("softmax")]
    model = ModelSpec(name, layers, freeze_fraction, class_count, input_side, input_channels)
    return apply_freeze(model, freeze_fraction)


def build_vgg(variant: str, class_count: int, freeze_fraction: float = 0.8,
              input_side: int = DEFAULT_INPUT_SIDE, input_channels: int = DEFAULT_INPUT_CHANNELS,
              head_units: int = DEFAULT_HEAD_UNITS, dropout: float = DEFAULT_DROPOUT,
              width_divisor: int = 1, seed: int = 0) -> ModelSpec:
    """VGG16/VGG19 feature extractor with a fresh ``class_count``-way head.

    ``width_divisor`` shrinks every conv width (keeping the layer structure),
    for experiments that cannot afford the full network.
    """
    key = variant.lower()
    if key not in VGG_BLOCKS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VGG_BLOCKS)}")
    if width_divisor < 1:
        raise ValueError("width_divisor must be >= 1")
    blocks = [[max(1, w // width_divisor)] * n for n, w in zip(VGG_BLOCKS[key], VGG_WIDTHS)]
    return build_sequential(key, blocks, class_count, freeze_fraction, input_side,
                            input_channels, head_units, dropout, seed)


def shape_walk(model: ModelSpec) -> List[Tuple[int, ...]]:
    """Per-layer output shapes (without batch axis), computed from hyperparameters alone."""
    shape: Tuple[int, ...] = (model.input_channels, model.input_side, model.input_side)
    shapes = []
    for i, layer in enumerate(model.layers):
        if layer.kind == "conv":
            f, c, k, _ = layer.params["weights"].shape
            if shape[0] != c:
                raise ValueError(f"layer {i}: expects {c} channels, got {shape[0]}")
            pad, stride = layer.hyper.get("pad", 0), layer.hyper.get("stride", 1)
            shape = (f,) + tuple((s + 2 * pad - k) // stride + 1 for s in shape[1:])
        elif layer.kind == "maxpool":
            p = layer.hyper.get("size", 2)
            shape = (shape[0], shape[1] // p, shape[2] // p)
        elif layer.kind == "flatten":
            shape = (math.prod(shape),)
        elif layer.kind == "dense":
            m, n = layer.params["weights"].shape
            if shape != (n,):
                raise ValueError(f"layer {i}: expects ({n},), got {shape}")
            shape = (m,)
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------- MVW1 weights format

MAGIC = b"MVW1"


class WeightsFormatError(ValueError):
    pass


def dumps_weights(tensors: Dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def loads_weights(buf: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightsFormatError("unexpected end of weights file")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise WeightsFormatError("not an MVW1 weights file (bad magic)")
    (count,) = struct.unpack("<I", take(4))
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise WeightsFormatError("tensor name is not valid UTF-8") from None
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = math.prod(dims)
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(DTYPE).reshape(dims)
        if name in tensors:
            raise WeightsFormatError(f"duplicate tensor {name!r}")
        tensors[name] = data
    if pos != len(view):
        raise WeightsFormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return tensors


def save_weights(model: ModelSpec, path: Union[str, os.PathLike],
                 names: Optional[Sequence[str]] = None) -> None:
    """Write all parameters (or only ``names``) in MVW1 format."""
    state = model.state_dict()
    if names is not None:
        state = {n: state[n] for n in names}
    Path(path).write_bytes(dumps_weights(state))


def load_weights(model: ModelSpec, path: Union[str, os.PathLike], allow_partial: bool = False) -> List[str]:
    """Copy tensors from an MVW1 file into ``model``; returns the names that were loaded.

    With ``allow_partial`` the file may omit model parameters (typically the
    head) and may carry tensors the model lacks; those are skipped. Shape
    mismatches are always an error.
    """
    tensors = loads_weights(Path(path).read_bytes())
    state = model.state_dict()
    for name, arr in tensors.items():
        if name not in state:
            if not allow_partial:
                raise WeightsFormatError(f"unknown tensor {name!r} in weights file")
            continue
        if arr.shape != state[name].shape:
            raise WeightsFormatError(f"dim mismatch for {name}: file {arr.shape}, model {state[name].shape}")
    missing = [n for n in state if n not in tensors]
    if missing and not allow_partial:
        raise WeightsFormatError(f"weights file lacks {len(missing)} tensor(s), e.g. {missing[0]}")
    loaded = []
    for name, layer, pname, _ in model.named_params():
        if name in tensors:
            layer.params[pname] = tensors[name].copy()
            loaded.append(name)
    return loaded


# ---------------------------------------------------------------- benchmark catalog

@dataclass(frozen=True)
class ModelCatalogEntry:
    name: str
    year: int
    flops_m: float
    params_m: float
    top1: float
    top5: float

    def as_row(self) -> Dict[str, str]:
        return {"model": self.name, "year": str(self.year), "flops_m": f"{self.flops_m:.2f}",
                "params_m": f"{self.params_m:.2f}", "top1": f"{self.top1:.2f}", "top5": f"{self.top5:.2f}"}


_CATALOG_ROWS = (
    ("AlexNet", 2012, 955.21, 61.10, 56.52, 79.07),
    ("VGG11", 2014, 8171.57, 132.86, 69.02, 88.63),
    ("VGG13", 2014, 11895.04, 133.05, 69.93, 89.25),
    ("VGG16", 2014, 16063.36, 138.36, 71.59, 90.38),
    ("VGG19", 2014, 20231.68, 143.67, 72.38, 90.88),
    ("ResNet18", 2015, 1836.82, 11.69, 69.76, 89.08),
    ("ResNet34", 2015, 3692.78, 21.80, 73.31, 91.42),
    ("ResNet50", 2015, 4154.96, 25.56, 76.13, 92.86),
    ("ResNet101", 2015, 7892.77, 44.55, 77.37, 93.55),
    ("ResNet152", 2015, 11636.60, 60.19, 78.31, 94.05),
    ("Inception-v3", 2015, 5730.17, 27.16, 75.64, 92.59),
    ("Inception-v4", 2015, 12561.10, 42.68, 80.08, 94.89),
    ("SqueezeNet-v1", 2016, 865.78, 1.25, 58.09, 80.42),
    ("SqueezeNet-v1.1", 2016, 377.80, 1.24, 58.18, 80.62),
    ("DenseNet 121", 2017, 2928.89, 7.98, 74.43, 91.97),
    ("DenseNet 169", 2017, 3473.88, 14.15, 75.60, 92.81),
    ("DenseNet 201", 2017, 4435.03, 20.01, 76.87, 93.37),
    ("DenseNet 161", 2017, 7902.37, 28.68, 77.14, 93.56),
    ("Xception", 2017, 8494.59, 22.86, 78.89, 94.29),
    ("MobileNetV2", 2017, 336.43, 3.50, 71.81, 90.42),
    ("ShuffleNet-v2.05", 2018, 52.32, 1.37, 60.55, 81.75),
    ("ShuffleNet-v2.1", 2018, 160.09, 2.28, 69.36, 88.32),
    ("MnasNet", 2018, 649.51, 4.38, 61.95, 84.73),
    ("PNASNet", 2018, 25945.87, 86.06, 82.74, 95.99),
    ("NasNet", 2018, 24882.21, 88.75, 82.51, 96.02),
    ("NasNet mobile", 2018, 667.75, 5.29, 74.08, 91.74),
)

CATALOG: Tuple[ModelCatalogEntry, ...] = tuple(ModelCatalogEntry(*row) for row in _CATALOG_ROWS)


def normalize_name(name: str) -> str:
    return "".join(ch for ch in name.lower() if ch not in " -_")


def catalog() -> List[ModelCatalogEntry]:
    return list(CATALOG)


def catalog_lookup(name: str) -> ModelCatalogEntry:
    key = normalize_name(name)
    for entry in CATALOG:
        if normalize_name(entry.name) == key:
            return entry
    raise KeyError(f"unknown model {name!r}")


# Prior results on the Malimg corpus, kept as literature reference values.
COMPARISON_TABLE = (
    ("CNN", 94.50),
    ("GIST + K-nearest neighbors", 97.18),
    ("M-CNN (VGG16)", 98.52),
    ("ResNet50", 98.62),
    ("Xception", 99.03),
    ("VGG19 fine-tuning (proposed strategy)", 99.72),
)


def comparison_table() -> str:
    width = max(len(m) for m, _ in COMPARISON_TABLE)
    lines = [f"{'Method':<{width}}  Accuracy (literature values, Malimg)"]
    lines += [f"{m:<{width}}  {acc:.2f}%" for m, acc in COMPARISON_TABLE]
    return "\n".join(lines) + "\n"
