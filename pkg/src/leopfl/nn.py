"""Small numpy neural-network kernel.

Tensors are plain ``numpy`` arrays in NCHW layout. Model parameters live in a
single flat vector (:class:`ParamVector`) segmented per layer as
``[weights..., bias...]`` so that masks, momentum and aggregation can all work
on one aligned array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerShape:
    layer_id: int
    kind: str  # "conv" or "dense"
    in_channels: int
    out_channels: int
    kernel: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and self.kernel != 1:
            raise ValueError("dense layers have kernel 1")

    @property
    def weight_count(self) -> int:
        return self.out_channels * self.in_channels * self.kernel**2

    @property
    def param_count(self) -> int:
        return self.weight_count + self.out_channels

    @property
    def weight_dims(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        return (self.out_channels, self.in_channels)


def _offsets(segments: Sequence[LayerShape]) -> list[int]:
    out = [0]
    for seg in segments:
        out.append(out[-1] + seg.param_count)
    return out


@dataclass
class ParamVector:
    """Flat parameter storage with per-layer segmentation."""

    segments: tuple[LayerShape, ...]
    values: np.ndarray
    _offsets: list[int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.segments = tuple(self.segments)
        self._offsets = _offsets(self.segments)
        if self.values.ndim != 1 or self.values.size != self._offsets[-1]:
            raise ShapeError(
                f"values length {self.values.size} does not match layout {self._offsets[-1]}"
            )

    @classmethod
    def zeros(cls, segments: Sequence[LayerShape], dtype=np.float32) -> "ParamVector":
        return cls(tuple(segments), np.zeros(sum(s.param_count for s in segments), dtype=dtype))

    def __len__(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def span(self, layer: int) -> tuple[int, int]:
        return self._offsets[layer], self._offsets[layer + 1]

    def weight_span(self, layer: int) -> tuple[int, int]:
        start = self._offsets[layer]
        return start, start + self.segments[layer].weight_count

    def bias_span(self, layer: int) -> tuple[int, int]:
        start = self._offsets[layer] + self.segments[layer].weight_count
        return start, self._offsets[layer + 1]

    def weight(self, layer: int) -> np.ndarray:
        a, b = self.weight_span(layer)
        return self.values[a:b].reshape(self.segments[layer].weight_dims)

    def bias(self, layer: int) -> np.ndarray:
        a, b = self.bias_span(layer)
        return self.values[a:b]

    def weight_positions(self) -> np.ndarray:
        """Boolean array, True on weight coordinates and False on biases."""
        flags = np.zeros(len(self), dtype=bool)
        for l in range(len(self.segments)):
            a, b = self.weight_span(l)
            flags[a:b] = True
        return flags

    def copy(self) -> "ParamVector":
        return ParamVector(self.segments, self.values.copy())

    def like(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.segments, values)

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.segments, self.values.astype(dtype))


@dataclass
class MomentumState:
    values: np.ndarray
    smoothing: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("momentum smoothing must lie in [0, 1)")

    @classmethod
    def zeros_like(cls, params: ParamVector, smoothing: float = 0.9) -> "MomentumState":
        return cls(np.zeros_like(params.values), smoothing)

    def copy(self) -> "MomentumState":
        return MomentumState(self.values.copy(), self.smoothing)


# ---------------------------------------------------------------- primitives


def _pad_amount(kernel: int, padding) -> int:
    if padding == "same":
        if kernel % 2 == 0:
            raise ShapeError("same padding needs an odd kernel")
        return kernel // 2
    if padding == "valid":
        return 0
    return int(padding)


def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kernel * kernel)
    return cols, ho, wo


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, padding="same", stride: int = 1):
    """Cross-correlation of an NCHW batch with OIHW weights plus per-channel bias."""
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    out_ch, in_ch, k, k2 = weights.shape
    if k != k2 or x.shape[1] != in_ch:
        raise ShapeError(f"input channels {x.shape[1]} incompatible with weights {weights.shape}")
    if bias.shape != (out_ch,):
        raise ShapeError("bias must have one entry per output channel")
    cols, ho, wo = _im2col(x, k, stride, _pad_amount(k, padding))
    out = cols @ weights.reshape(out_ch, -1).T + bias
    return out.reshape(x.shape[0], ho, wo, out_ch).transpose(0, 3, 1, 2)


def _conv2d_backward(x, weights, dout, pad, stride, cols, need_dx=True):
    n, c, h, w = x.shape
    out_ch, _, k, _ = weights.shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, out_ch)
    dw = (dflat.T @ cols).reshape(weights.shape)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    ho, wo = dout.shape[2], dout.shape[3]
    dcols = (dflat @ weights.reshape(out_ch, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits: np.ndarray, label) -> float:
    """Softmax cross-entropy; ``logits`` may be one row or a batch of rows."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(label))
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


# ------------------------------------------------------------------ networks


@dataclass(frozen=True)
class LayerSpec:
    shape: LayerShape
    stride: int = 1
    activation: bool = True


class Network:
    """A fixed feed-forward stack of conv layers, optionally followed by
    global average pooling and dense layers.

    The network itself holds no parameters; every call takes a ParamVector so
    that many satellites can share one architecture object.
    """

    def __init__(self, layers: Sequence[LayerSpec], padding="same"):
        self.layers = tuple(layers)
        self.padding = padding
        seen_dense = False
        for spec in self.layers:
            if spec.shape.kind == "dense":
                seen_dense = True
            elif seen_dense:
                raise ValueError("conv layers cannot follow dense layers")

    @property
    def segments(self) -> tuple[LayerShape, ...]:
        return tuple(spec.shape for spec in self.layers)

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> ParamVector:
        """Kaiming-uniform weights, zero biases."""
        params = ParamVector.zeros(self.segments, dtype=np.float64)
        for l, spec in enumerate(self.layers):
            fan_in = spec.shape.in_channels * spec.shape.kernel**2
            bound = math.sqrt(6.0 / fan_in)
            a, b = params.weight_span(l)
            params.values[a:b] = rng.uniform(-bound, bound, size=b - a)
        return params.astype(dtype)

    def forward(self, params: ParamVector, x: np.ndarray, keep_cache: bool = False):
        cache = []
        h = x.astype(params.dtype, copy=False)
        for l, spec in enumerate(self.layers):
            w, b = params.weight(l), params.bias(l)
            if spec.shape.kind == "conv":
                if h.ndim != 4 or h.shape[1] != spec.shape.in_channels:
                    raise ShapeError(f"layer {l} expects {spec.shape.in_channels} channels, got {h.shape}")
                pad = _pad_amount(spec.shape.kernel, self.padding)
                cols, ho, wo = _im2col(h, spec.shape.kernel, spec.stride, pad)
                z = (cols @ w.reshape(spec.shape.out_channels, -1).T + b).reshape(
                    h.shape[0], ho, wo, spec.shape.out_channels
                ).transpose(0, 3, 1, 2)
                entry = {"x": h, "cols": cols, "pad": pad}
            else:
                if h.ndim == 4:
                    entry = {"pooled_from": h.shape}
                    h = h.mean(axis=(2, 3))
                else:
                    entry = {}
                if h.shape[1] != spec.shape.in_channels:
                    raise ShapeError(f"layer {l} expects {spec.shape.in_channels} features, got {h.shape}")
                entry["x"] = h
                z = h @ w.T + b
            if spec.activation:
                entry["z"] = z
                h = np.maximum(z, 0)
            else:
                h = z
            if keep_cache:
                cache.append(entry)
        return (h, cache) if keep_cache else h

    def backward(self, params: ParamVector, cache, dout: np.ndarray) -> ParamVector:
        grad = np.zeros_like(params.values)
        g = dout
        for l in range(len(self.layers) - 1, -1, -1):
            spec, entry = self.layers[l], cache[l]
            if spec.activation:
                g = g * (entry["z"] > 0)
            w = params.weight(l)
            wa, wb = params.weight_span(l)
            ba, bb = params.bias_span(l)
            need_dx = l > 0
            if spec.shape.kind == "conv":
                dx, dw, db = _conv2d_backward(
                    entry["x"], w, g, entry["pad"], spec.stride, entry["cols"], need_dx
                )
            else:
                dw = g.T @ entry["x"]
                db = g.sum(axis=0)
                dx = g @ w if need_dx else None
                if need_dx and "pooled_from" in entry:
                    n, c, hh, ww = entry["pooled_from"]
                    dx = np.broadcast_to((dx / (hh * ww))[:, :, None, None], (n, c, hh, ww))
            grad[wa:wb] = dw.reshape(-1)
            grad[ba:bb] = db
            g = dx
        return params.like(grad)

    def loss_and_grad(self, params: ParamVector, x: np.ndarray, target: np.ndarray, loss: str):
        """Batch loss and its exact gradient.

        ``loss="mse"`` is the per-element mean squared error against an image
        target; ``loss="xent"`` is the batch-mean softmax cross-entropy
        against integer labels.
        """
        out, cache = self.forward(params, x, keep_cache=True)
        if loss == "mse":
            if out.shape != target.shape:
                raise ShapeError(f"prediction {out.shape} vs target {target.shape}")
            diff = out - target.astype(out.dtype, copy=False)
            value = float(np.mean(np.square(diff, dtype=np.float64)))
            dout = (2.0 / diff.size) * diff
        elif loss == "xent":
            labels = np.asarray(target)
            logp = _log_softmax(out.astype(np.float64))
            rows = np.arange(len(labels))
            value = float(-logp[rows, labels].mean())
            probs = np.exp(logp)
            probs[rows, labels] -= 1.0
            dout = (probs / len(labels)).astype(out.dtype)
        else:
            raise ValueError(f"unknown loss {loss!r}")
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite {loss} loss")
        return value, self.backward(params, cache, dout.astype(out.dtype, copy=False))

    def macs_per_sample(self, height: int, width: int) -> list[int]:
        """Multiply-accumulate count of each layer for one input image."""
        out = []
        h, w = height, width
        for spec in self.layers:
            s = spec.shape
            if s.kind == "conv":
                h = -(-h // spec.stride)
                w = -(-w // spec.stride)
                out.append(h * w * s.weight_count)
            else:
                out.append(s.weight_count)
        return out


def backprop(net: Network, params: ParamVector, batch, loss: str = "mse") -> ParamVector:
    x, target = batch
    return net.loss_and_grad(params, x, target, loss)[1]


def sgd_momentum_step(params: ParamVector, grad: ParamVector, momentum: MomentumState, lr: float):
    """``M <- lam*M + (1-lam)*g`` then ``w <- w - lr*M``; returns new objects."""
    lam = momentum.smoothing
    m = (lam * momentum.values + (1.0 - lam) * grad.values).astype(momentum.values.dtype)
    w = (params.values - lr * m).astype(params.values.dtype)
    return params.like(w), MomentumState(m, lam)


def finite_difference_grad(loss_fn, values: np.ndarray, coords: Sequence[int], eps: float = 1e-3) -> np.ndarray:
    """Central differences of ``loss_fn(values)`` at the selected coordinates."""
    out = np.empty(len(coords))
    work = values.astype(np.float64).copy()
    for i, c in enumerate(coords):
        orig = work[c]
        work[c] = orig + eps
        up = loss_fn(work)
        work[c] = orig - eps
        down = loss_fn(work)
        work[c] = orig
        out[i] = (up - down) / (2 * eps)
    return out
