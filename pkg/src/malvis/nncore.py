"""
Layer kernels in plain numpy.

Forward functions return ``(out, cache)`` and the matching backward function
takes ``(dout, cache)``. Kernels accept a single sample or a leading batch
axis and keep the dtype of their inputs (float32 in models, float64 when a
gradient check wants it).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Hashable, List, Mapping, MutableMapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "dense", "dropout", "softmax")


@dataclass
class Layer:
    """One layer of a sequential network: kind, named parameters, freeze flag, settings."""

    kind: str
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = False
    hyper: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def trainable(self) -> bool:
        return bool(self.params) and not self.frozen


def _as_batch(x: np.ndarray, ndim: int) -> Tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ValueError(f"shape mismatch: expected {ndim - 1}-D or {ndim}-D input, got {x.shape}")
    return x, False


def _check_cache(dout: np.ndarray, cache: dict) -> np.ndarray:
    if cache.get("op") is None or dout.shape != cache["out_shape"]:
        raise ValueError(f"mismatched cache: gradient {dout.shape} vs cached output {cache.get('out_shape')}")
    return dout[None] if cache["squeezed"] else dout


# ---------------------------------------------------------------- convolution

def conv2d_forward(x, w, b, stride: int = 1, pad: int = 0):
    """Cross-correlation of x [C,H,W] or [N,C,H,W] with w [F,C,k,k], plus bias [F]."""
    x, squeezed = _as_batch(np.asarray(x), 4)
    n, c, h, wd = x.shape
    f, wc, kh, kw = w.shape
    if wc != c or kh != kw or b.shape != (f,):
        raise ValueError(f"shape mismatch: input {x.shape}, weights {w.shape}, bias {b.shape}")
    k = kh
    span_h, span_w = h + 2 * pad - k, wd + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(f"shape mismatch: {h}x{wd} input, kernel {k}, stride {stride}, pad {pad}")
    oh, ow = span_h // stride + 1, span_w // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    out = cols @ w.reshape(f, -1).T + b
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if squeezed:
        out = out[0]
    cache = {"op": "conv", "cols": cols, "w": w, "x_shape": x.shape, "stride": stride,
             "pad": pad, "out_shape": out.shape, "squeezed": squeezed}
    return out, cache


def conv2d_backward(dout, cache, need_input_grad: bool = True):
    dout = _check_cache(np.asarray(dout), cache)
    w, cols, stride, pad = cache["w"], cache["cols"], cache["stride"], cache["pad"]
    n, c, h, wd = cache["x_shape"]
    f, _, k, _ = w.shape
    oh, ow = dout.shape[2], dout.shape[3]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dx = None
    if need_input_grad:
        dcols = (dmat @ w.reshape(f, -1)).reshape(n, oh, ow, c, k, k)
        dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dmat.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        dx = np.ascontiguousarray(dx)
        if cache["squeezed"]:
            dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------- dense

def dense_forward(x, w, b):
    """Affine map ``w @ x + b`` for x [N] or [B,N], w [M,N], b [M]."""
    x, squeezed = _as_batch(np.asarray(x), 2)
    if w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"shape mismatch: input {x.shape}, weights {w.shape}, bias {b.shape}")
    out = x @ w.T + b
    if squeezed:
        out = out[0]
    return out, {"op": "dense", "x": x, "w": w, "out_shape": out.shape, "squeezed": squeezed}


def dense_backward(dout, cache, need_input_grad: bool = True):
    dout = _check_cache(np.asarray(dout), cache)
    x, w = cache["x"], cache["w"]
    dw = dout.T @ x
    db = dout.sum(axis=0)
    dx = None
    if need_input_grad:
        dx = dout @ w
        if cache["squeezed"]:
            dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------- elementwise / reshaping

def relu_forward(x):
    x = np.asarray(x)
    mask = x > 0
    out = np.where(mask, x, np.zeros((), dtype=x.dtype))
    return out, {"op": "relu", "mask": mask, "out_shape": out.shape, "squeezed": False}


def relu_backward(dout, cache):
    dout = _check_cache(np.asarray(dout), cache)
    return np.where(cache["mask"], dout, np.zeros((), dtype=dout.dtype))


def maxpool_forward(x, size: int = 2):
    """Non-overlapping ``size`` x ``size`` max-pool; trailing rows/cols that do not fill a window are dropped."""
    x, squeezed = _as_batch(np.asarray(x), 4)
    n, c, h, wd = x.shape
    oh, ow = h // size, wd // size
    if oh == 0 or ow == 0:
        raise ValueError(f"shape mismatch: {h}x{wd} input too small for {size}x{size} pooling")
    blocks = x[:, :, :oh * size, :ow * size].reshape(n, c, oh, size, ow, size)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    # np.argmax returns the first maximum, i.e. row-major tie-breaking
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    if squeezed:
        out = out[0]
    cache = {"op": "maxpool", "arg": arg, "x_shape": x.shape, "size": size,
             "out_shape": out.shape, "squeezed": squeezed}
    return out, cache


def maxpool_backward(dout, cache):
    dout = _check_cache(np.asarray(dout), cache)
    n, c, h, wd = cache["x_shape"]
    size, arg = cache["size"], cache["arg"]
    oh, ow = arg.shape[2], arg.shape[3]
    routed = np.zeros((n, c, oh, ow, size * size), dtype=dout.dtype)
    np.put_along_axis(routed, arg[..., None], dout[..., None], axis=-1)
    routed = routed.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((n, c, h, wd), dtype=dout.dtype)
    dx[:, :, :oh * size, :ow * size] = routed.reshape(n, c, oh * size, ow * size)
    return dx[0] if cache["squeezed"] else dx


def flatten_forward(x):
    """Flatten everything after the batch axis; x is always batched here."""
    x = np.asarray(x)
    out = x.reshape(x.shape[0], -1)
    return out, {"op": "flatten", "x_shape": x.shape, "out_shape": out.shape, "squeezed": False}


def flatten_backward(dout, cache):
    dout = _check_cache(np.asarray(dout), cache)
    return dout.reshape(cache["x_shape"])


def dropout_forward(x, rate: float, training: bool, rng: Optional[np.random.Generator] = None):
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time only."""
    x = np.asarray(x)
    if not training or rate <= 0.0:
        mask = None
        out = x
    else:
        if rng is None:
            rng = np.random.default_rng()
        keep = 1.0 - rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        out = x * mask
    return out, {"op": "dropout", "mask": mask, "out_shape": out.shape, "squeezed": False}


def dropout_backward(dout, cache):
    dout = _check_cache(np.asarray(dout), cache)
    return dout if cache["mask"] is None else dout * cache["mask"]


# ---------------------------------------------------------------- loss

def softmax(logits):
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, target):
    """Categorical cross-entropy of softmax(logits) against integer targets.

    For a single logit vector [K] with an integer target returns
    ``(loss, grad)``. For a batch [B, K] with B targets the loss is the
    batch mean and the gradient is scaled by 1/B accordingly.
    """
    z = np.asarray(logits)
    single = z.ndim == 1
    if single:
        z = z[None]
        target = np.asarray([target])
    target = np.asarray(target)
    if z.ndim != 2 or z.shape[1] == 0:
        raise ValueError(f"logits must be non-empty, got shape {np.shape(logits)}")
    k = z.shape[1]
    if target.shape != (z.shape[0],) or not np.issubdtype(target.dtype, np.integer):
        raise ValueError("targets must be one integer class per logit row")
    if np.any(target < 0) or np.any(target >= k):
        raise ValueError(f"target class out of range [0, {k})")
    rows = np.arange(z.shape[0])
    logp = _log_softmax(z)
    losses = -logp[rows, target]
    grad = np.exp(logp)
    grad[rows, target] -= 1
    if single:
        return float(losses[0]), grad[0]
    b = z.shape[0]
    return float(losses.mean(dtype=np.float64)), grad / z.dtype.type(b)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    velocity: Dict[Hashable, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_momentum_step(params: MutableMapping[Hashable, np.ndarray],
                      grads: Mapping[Hashable, np.ndarray],
                      opt: OptimizerState):
    """In-place update ``v = momentum*v - lr*g; w = w + v`` for every key in ``grads``."""
    for key, g in grads.items():
        w = params[key]
        if g.shape != w.shape:
            raise ValueError(f"shape mismatch for {key!r}: grad {g.shape} vs param {w.shape}")
        v = opt.velocity.get(key)
        if v is None:
            v = opt.velocity[key] = np.zeros_like(w)
        elif v.shape != w.shape:
            raise ValueError(f"shape mismatch for {key!r}: velocity {v.shape} vs param {w.shape}")
        v *= opt.momentum
        v -= opt.learning_rate * g
        w += v
    return params, opt


# ---------------------------------------------------------------- initialisation

def glorot_uniform(shape: Sequence[int], rng: np.random.Generator, dtype=DTYPE) -> np.ndarray:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        fan_out, fan_in = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv_layer(in_ch: int, out_ch: int, rng: np.random.Generator, k: int = 3,
               stride: int = 1, pad: int = 1) -> Layer:
    return Layer("conv", {"weights": glorot_uniform((out_ch, in_ch, k, k), rng),
                          "bias": np.zeros(out_ch, DTYPE)},
                 hyper={"kernel": k, "stride": stride, "pad": pad})


def dense_layer(n_in: int, n_out: int, rng: np.random.Generator) -> Layer:
    return Layer("dense", {"weights": glorot_uniform((n_out, n_in), rng),
                           "bias": np.zeros(n_out, DTYPE)},
                 hyper={"units": n_out})


# ---------------------------------------------------------------- composition

def _layer_forward(layer: Layer, x, training: bool, rng):
    kind = layer.kind
    if kind == "conv":
        return conv2d_forward(x, layer.params["weights"], layer.params["bias"],
                              layer.hyper.get("stride", 1), layer.hyper.get("pad", 0))
    if kind == "dense":
        return dense_forward(x, layer.params["weights"], layer.params["bias"])
    if kind == "relu":
        return relu_forward(x)
    if kind == "maxpool":
        return maxpool_forward(x, layer.hyper.get("size", 2))
    if kind == "flatten":
        return flatten_forward(x)
    if kind == "dropout":
        return dropout_forward(x, layer.hyper.get("rate", 0.0), training, rng)
    raise ValueError(f"layer kind {kind!r} has no forward kernel")


def _logit_layers(layers: Sequence[Layer]) -> int:
    """Number of leading layers that produce logits (a terminal softmax is excluded)."""
    n = len(layers)
    for i, layer in enumerate(layers):
        if layer.kind == "softmax" and i != n - 1:
            raise ValueError(f"layer {i}: softmax is only allowed as the final layer")
    return n - 1 if n and layers[-1].kind == "softmax" else n


def forward_cached(layers: Sequence[Layer], x, training: bool = False,
                   rng: Optional[np.random.Generator] = None, keep_cache: bool = True):
    """Run a batch [B, ...] through the layers and return (logits, caches)."""
    caches: List[Optional[dict]] = []
    out = x
    for i in range(_logit_layers(layers)):
        try:
            out, cache = _layer_forward(layers[i], out, training, rng)
        except ValueError as exc:
            raise ValueError(f"layer {i} ({layers[i].kind}): {exc}") from None
        caches.append(cache if keep_cache else None)
    return out, caches


def forward(layers: Sequence[Layer], x, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Logits for a single input [C,H,W] (or flat vector) or a batch.

    A terminal softmax layer is not applied; use :func:`softmax` on the
    result for probabilities.
    """
    values = np.asarray(getattr(x, "values", x))
    single = values.ndim in (1, 3)
    batch = values[None] if single else values
    logits, _ = forward_cached(layers, batch, training, rng, keep_cache=False)
    return logits[0] if single else logits


def backward(layers: Sequence[Layer], caches: Sequence[dict], dlogits) -> List[Optional[Dict[str, np.ndarray]]]:
    """Parameter gradients for every trainable layer (``None`` elsewhere).

    Backpropagation stops at the earliest trainable layer; a frozen prefix
    costs nothing.
    """
    n = _logit_layers(layers)
    grads: List[Optional[Dict[str, np.ndarray]]] = [None] * len(layers)
    trainable = [i for i in range(n) if layers[i].trainable]
    if not trainable:
        return grads
    stop = trainable[0]
    d = dlogits
    for i in range(n - 1, stop - 1, -1):
        layer, cache = layers[i], caches[i]
        if cache is None:
            raise ValueError(f"layer {i}: no cached forward context")
        need_dx = i > stop
        kind = layer.kind
        if kind in ("conv", "dense"):
            fn = conv2d_backward if kind == "conv" else dense_backward
            dx, dw, db = fn(d, cache, need_input_grad=need_dx)
            if layer.trainable:
                grads[i] = {"weights": dw, "bias": db}
            d = dx
        elif kind == "relu":
            d = relu_backward(d, cache)
        elif kind == "maxpool":
            d = maxpool_backward(d, cache)
        elif kind == "flatten":
            d = flatten_backward(d, cache)
        elif kind == "dropout":
            d = dropout_backward(d, cache)
    return grads
