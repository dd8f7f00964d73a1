"""Mini-batch SGD training with per-epoch validation and MVW1 checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import nncore
from .corpus import TEST, TRAIN, CorpusManifest
from .models import ModelSpec, save_weights
from .visualize import image_to_input, read_image_png

logger = logging.getLogger(__name__)

CURVE_HEADER = ("epoch", "acc", "loss", "val_acc", "val_loss")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    seed: int = 42
    shuffle_each_epoch: bool = True
    loss: str = "categorical_crossentropy"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.loss != "categorical_crossentropy":
            raise ValueError(f"unsupported loss {self.loss!r}")

    def describe(self) -> str:
        return (f"lr={self.learning_rate!r} momentum={self.momentum!r} batch={self.batch_size} "
                f"epochs={self.epochs} seed={self.seed} loss={self.loss}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    acc: float
    loss: float
    val_acc: Optional[float] = None
    val_loss: Optional[float] = None


@dataclass
class TrainCurve:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]


# ---------------------------------------------------------------- inputs

class InputCache:
    """Decoded, resized network inputs keyed by (path, side, channels)."""

    def __init__(self):
        self._store: Dict[Tuple[str, int, int], np.ndarray] = {}

    def get(self, path: str, side: int, channels: int) -> np.ndarray:
        key = (path, side, channels)
        arr = self._store.get(key)
        if arr is None:
            arr = image_to_input(read_image_png(path), side, channels).values
            self._store[key] = arr
        return arr

    def stack(self, paths: Sequence[str], side: int, channels: int) -> np.ndarray:
        if not paths:
            return np.zeros((0, channels, side, side), dtype=nncore.DTYPE)
        return np.stack([self.get(p, side, channels) for p in paths])


def load_split(manifest: CorpusManifest, split: Optional[str], side: int, channels: int,
               cache: Optional[InputCache] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs [N, C, side, side] and class indices [N] for one split (``None`` = all records)."""
    cache = cache or InputCache()
    records = manifest.select(split)
    x = cache.stack([r.image_path for r in records], side, channels)
    y = np.asarray([r.family.index for r in records], dtype=np.int64)
    return x, y


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([int(seed), int(epoch), 0x5EED]).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> List[np.ndarray]:
    order = epoch_order(n, seed, epoch, shuffle)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iterator(manifest: CorpusManifest, split: str, batch_size: int, seed: int, epoch: int,
                   side: int, channels: int, cache: Optional[InputCache] = None,
                   shuffle: bool = True) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (inputs, class indices) batches covering the split exactly once, in a per-epoch order."""
    x, y = load_split(manifest, split, side, channels, cache)
    if len(y) == 0:
        raise ValueError(f"split {split!r} is empty")
    for idx in batch_indices(len(y), batch_size, seed, epoch, shuffle):
        yield x[idx], y[idx]


# ---------------------------------------------------------------- loop

def trainable_params(model: ModelSpec) -> Dict[Tuple[int, str], np.ndarray]:
    return {(i, name): arr for i, layer in enumerate(model.layers) if layer.trainable
            for name, arr in layer.params.items()}


def train_step(model: ModelSpec, x: np.ndarray, y: np.ndarray, opt: nncore.OptimizerState,
               rng: np.random.Generator) -> Tuple[float, int]:
    """One forward/backward/update on a batch; returns (mean loss, correct count)."""
    logits, caches = nncore.forward_cached(model.layers, x, training=True, rng=rng)
    loss, dlogits = nncore.softmax_cross_entropy(logits, y)
    grads = nncore.backward(model.layers, caches, dlogits)
    flat = {(i, name): g for i, gd in enumerate(grads) if gd for name, g in gd.items()}
    nncore.sgd_momentum_step(trainable_params(model), flat, opt)
    return loss, int((logits.argmax(axis=1) == y).sum())


def predict_logits(model: ModelSpec, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = [nncore.forward(model.layers, x[i:i + batch_size], training=False)
            for i in range(0, len(x), batch_size)]
    if not outs:
        return np.zeros((0, model.class_count), dtype=nncore.DTYPE)
    return np.concatenate(outs)


def loss_and_accuracy(model: ModelSpec, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> Tuple[float, float]:
    logits = predict_logits(model, x, batch_size)
    loss, _ = nncore.softmax_cross_entropy(logits, y)
    return loss, float((logits.argmax(axis=1) == y).mean())


def train_model(model: ModelSpec, corpus: CorpusManifest, cfg: TrainConfig = TrainConfig(),
                cache: Optional[InputCache] = None,
                checkpoint_dir: Optional[Union[str, os.PathLike]] = None,
                run_id: str = "run") -> Tuple[ModelSpec, TrainCurve]:
    """Train ``model`` in place on the train split, validating on the test split every epoch.

    Train accuracy/loss per epoch are averaged over the training-mode passes
    of that epoch (sample-weighted). Checkpoints, when requested, are written
    after every epoch as ``<run_id>.epoch<N>.mvw``.
    """
    if model.class_count != len(corpus.family_table):
        raise ValueError(f"model has {model.class_count} classes, corpus has {len(corpus.family_table)} families")
    cache = cache or InputCache()
    side, channels = model.input_side, model.input_channels
    x_tr, y_tr = load_split(corpus, TRAIN, side, channels, cache)
    if len(y_tr) == 0:
        raise ValueError("empty train split")
    x_va, y_va = load_split(corpus, TEST, side, channels, cache)
    opt = nncore.OptimizerState(cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng([int(cfg.seed), 0xD809])
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    curve = TrainCurve()
    for epoch in range(1, cfg.epochs + 1):
        loss_sum, correct = 0.0, 0
        for idx in batch_indices(len(y_tr), cfg.batch_size, cfg.seed, epoch, cfg.shuffle_each_epoch):
            loss, ok = train_step(model, x_tr[idx], y_tr[idx], opt, rng)
            loss_sum += loss * len(idx)
            correct += ok
        val_loss = val_acc = None
        if len(y_va):
            val_loss, val_acc = loss_and_accuracy(model, x_va, y_va)
        rec = EpochRecord(epoch, correct / len(y_tr), loss_sum / len(y_tr), val_acc, val_loss)
        curve.records.append(rec)
        logger.info("epoch %d acc=%.4f loss=%.4f val_acc=%s val_loss=%s",
                    epoch, rec.acc, rec.loss, val_acc, val_loss)
        if checkpoint_dir is not None:
            save_weights(model, Path(checkpoint_dir) / f"{run_id}.epoch{epoch}.mvw")
    return model, curve


# ---------------------------------------------------------------- curve CSV

def _cell(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def curve_csv(curve: TrainCurve) -> str:
    lines = [",".join(CURVE_HEADER)]
    for r in curve.records:
        lines.append(",".join((str(r.epoch), _cell(r.acc), _cell(r.loss), _cell(r.val_acc), _cell(r.val_loss))))
    return "\n".join(lines) + "\n"


def emit_curve_csv(curve: TrainCurve, path: Union[str, os.PathLike]) -> None:
    Path(path).write_text(curve_csv(curve), encoding="utf-8")


def read_curve_csv(path: Union[str, os.PathLike]) -> TrainCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CURVE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CURVE_HEADER)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                vals = [float(v) if v.strip() else None for v in row[1:]]
                epoch = int(row[0])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed number") from None
            if vals[0] is None or vals[1] is None:
                raise ValueError(f"{path}:{lineno}: acc and loss are required")
            records.append(EpochRecord(epoch, *vals))
    return TrainCurve(records)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
