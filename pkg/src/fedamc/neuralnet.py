"""A small convolutional classifier with hand-written backpropagation.

Activations are kept channels-last (``N, H, W, C``); the 2 x 128 I/Q frame is
a one-channel image.  Convolutions are computed as an im2col matrix product.
Conv weights have shape ``(kh, kw, c_in, c_out)`` and Dense weights
``(n_in, n_out)``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DimensionError,
    EmptyInputError,
    FormatError,
    LabelError,
    SpecificationError,
)


class LayerKind(enum.Enum):
    CONV2D = "conv2d"
    DENSE = "dense"
    RELU = "relu"
    DROPOUT = "dropout"
    SOFTMAX = "softmax"
    FLATTEN = "flatten"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    padding: str = "valid"
    units: int = 0
    rate: float = 0.0

    @property
    def has_params(self) -> bool:
        return self.kind in (LayerKind.CONV2D, LayerKind.DENSE)


def conv2d(channels: int, kernel: tuple[int, int], padding: str = "valid") -> LayerSpec:
    return LayerSpec(LayerKind.CONV2D, channels=channels, kernel=tuple(kernel), padding=padding)


def dense(units: int) -> LayerSpec:
    return LayerSpec(LayerKind.DENSE, units=units)


def relu() -> LayerSpec:
    return LayerSpec(LayerKind.RELU)


def dropout(rate: float) -> LayerSpec:
    return LayerSpec(LayerKind.DROPOUT, rate=rate)


def flatten() -> LayerSpec:
    return LayerSpec(LayerKind.FLATTEN)


def softmax() -> LayerSpec:
    return LayerSpec(LayerKind.SOFTMAX)


def default_architecture(
    num_classes: int,
    channels: tuple[int, int] = (16, 32),
    hidden: int = 128,
    dropout_rate: float = 0.5,
) -> list[LayerSpec]:
    """Conv(same) -> Conv(valid) -> Dense -> Dense, ReLU + dropout in between."""
    return [
        conv2d(channels[0], (1, 3), "same"),
        relu(),
        dropout(dropout_rate),
        conv2d(channels[1], (2, 3), "valid"),
        relu(),
        dropout(dropout_rate),
        flatten(),
        dense(hidden),
        relu(),
        dense(num_classes),
    ]


def _conv_padding(kernel: tuple[int, int], mode: str) -> tuple[tuple[int, int], tuple[int, int]]:
    if mode == "valid":
        return (0, 0), (0, 0)
    if mode == "same":
        kh, kw = kernel
        return ((kh - 1) // 2, kh - 1 - (kh - 1) // 2), ((kw - 1) // 2, kw - 1 - (kw - 1) // 2)
    raise SpecificationError(f"unknown padding mode {mode!r}")


def infer_shapes(specs: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-layer output shapes (without the batch axis)."""
    shapes = []
    shape = tuple(input_shape)
    for idx, spec in enumerate(specs):
        if spec.kind is LayerKind.CONV2D:
            if len(shape) != 3:
                raise SpecificationError(f"layer {idx}: Conv2D needs (H, W, C) input, got {shape}", idx)
            (pt, pb), (pl, pr) = _conv_padding(spec.kernel, spec.padding)
            h = shape[0] + pt + pb - spec.kernel[0] + 1
            w = shape[1] + pl + pr - spec.kernel[1] + 1
            if h < 1 or w < 1 or spec.channels < 1:
                raise SpecificationError(f"layer {idx}: Conv2D output would be empty", idx)
            shape = (h, w, spec.channels)
        elif spec.kind is LayerKind.DENSE:
            if len(shape) != 1:
                raise SpecificationError(f"layer {idx}: Dense needs flat input, got {shape}", idx)
            if spec.units < 1:
                raise SpecificationError(f"layer {idx}: Dense needs units >= 1", idx)
            shape = (spec.units,)
        elif spec.kind is LayerKind.FLATTEN:
            shape = (int(np.prod(shape)),)
        elif spec.kind is LayerKind.DROPOUT:
            if not 0.0 <= spec.rate < 1.0:
                raise SpecificationError(f"layer {idx}: dropout rate must be in [0, 1)", idx)
        elif spec.kind is LayerKind.SOFTMAX:
            if idx != len(specs) - 1:
                raise SpecificationError(f"layer {idx}: Softmax must be the last layer", idx)
        shapes.append(shape)
    if len(shapes) and len(shapes[-1]) != 1:
        raise SpecificationError("network must end in a flat (class) output", len(specs) - 1)
    return shapes


@dataclass
class ModelParams:
    """Layer specs plus one ``{"W": ..., "b": ...}`` dict per layer (empty if no params)."""

    specs: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    layers: list[dict[str, np.ndarray]]

    @property
    def num_classes(self) -> int:
        return infer_shapes(self.specs, self.input_shape)[-1][0]

    @property
    def dtype(self) -> np.dtype:
        for layer in self.layers:
            for arr in layer.values():
                return arr.dtype
        return np.dtype(np.float64)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.specs, self.input_shape, [{k: v.copy() for k, v in l.items()} for l in self.layers]
        )

    def tensors(self) -> list[np.ndarray]:
        """Parameter tensors in layer order, W before b."""
        return [layer[k] for layer in self.layers for k in ("W", "b") if k in layer]

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "ModelParams":
        it = iter(tensors)
        layers = []
        for layer in self.layers:
            layers.append({k: np.array(next(it), copy=True) for k in ("W", "b") if k in layer})
        return ModelParams(self.specs, self.input_shape, layers)

    def astype(self, dtype) -> "ModelParams":
        return self.with_tensors([t.astype(dtype) for t in self.tensors()])

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()]) if self.tensors() else np.zeros(0)

    def equal(self, other: "ModelParams") -> bool:
        a, b = self.tensors(), other.tensors()
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


Gradients = list  # list[dict[str, np.ndarray]] mirroring ModelParams.layers


def init_model(
    specs: Sequence[LayerSpec],
    seed: int,
    input_shape: tuple[int, int, int] = (2, 128, 1),
    dtype=np.float32,
) -> ModelParams:
    """He-uniform weights (limit ``sqrt(6 / fan_in)``), zero biases."""
    specs = tuple(specs)
    shapes = infer_shapes(specs, input_shape)
    rng = np.random.default_rng(seed)
    layers: list[dict[str, np.ndarray]] = []
    prev = tuple(input_shape)
    for spec, out_shape in zip(specs, shapes):
        if spec.kind is LayerKind.CONV2D:
            kh, kw = spec.kernel
            fan_in = kh * kw * prev[2]
            lim = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-lim, lim, size=(kh, kw, prev[2], spec.channels))
            layers.append({"W": w.astype(dtype), "b": np.zeros(spec.channels, dtype=dtype)})
        elif spec.kind is LayerKind.DENSE:
            lim = np.sqrt(6.0 / prev[0])
            w = rng.uniform(-lim, lim, size=(prev[0], spec.units))
            layers.append({"W": w.astype(dtype), "b": np.zeros(spec.units, dtype=dtype)})
        else:
            layers.append({})
        prev = out_shape
    return ModelParams(specs, tuple(input_shape), layers)


# -- forward / backward ------------------------------------------------------


def _as_input(model: ModelParams, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch)
    h, w, c = model.input_shape
    if x.ndim == 3 and c == 1:
        x = x[..., None]
    if x.shape[1:] != (h, w, c):
        raise DimensionError(f"batch shape {np.shape(batch)} does not match model input {model.input_shape}")
    return x.astype(model.dtype, copy=False)


def _im2col(x: np.ndarray, spec: LayerSpec) -> tuple[np.ndarray, tuple[int, int]]:
    (pt, pb), (pl, pr) = _conv_padding(spec.kernel, spec.padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    kh, kw = spec.kernel
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # N, Ho, Wo, C, kh, kw
    n, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)
    return cols, (ho, wo)


def _keep_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float) -> np.ndarray:
    # 16-bit uniform draws from raw bytes; much cheaper than rng.random for big masks
    n = int(np.prod(shape))
    u = np.frombuffer(rng.bytes(2 * n), dtype="<u2").reshape(shape)
    return u >= int(round(rate * 65536))


def _forward(model: ModelParams, x: np.ndarray, train: bool, rng: np.random.Generator | None):
    caches = []
    for spec, p in zip(model.specs, model.layers):
        kind = spec.kind
        if kind is LayerKind.CONV2D:
            n = x.shape[0]
            cols, (ho, wo) = _im2col(x, spec)
            out = cols @ p["W"].reshape(-1, spec.channels) + p["b"]
            caches.append((cols, x.shape))
            x = out.reshape(n, ho, wo, spec.channels)
        elif kind is LayerKind.DENSE:
            caches.append(x)
            x = x @ p["W"] + p["b"]
        elif kind is LayerKind.RELU:
            caches.append(x > 0)
            x = np.maximum(x, 0)
        elif kind is LayerKind.DROPOUT:
            if train and spec.rate > 0:
                if rng is None:
                    raise ValueError("dropout in train mode needs an rng")
                keep = _keep_mask(rng, x.shape, spec.rate)
                scale = x.dtype.type(1.0 / (1.0 - spec.rate))
                caches.append((keep, scale))
                x = x * keep
                x *= scale
            else:
                caches.append(None)
        elif kind is LayerKind.FLATTEN:
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        else:  # softmax: logits are returned raw
            caches.append(None)
    return x, caches


def _backward(model: ModelParams, dout: np.ndarray, caches) -> Gradients:
    grads: Gradients = [{} for _ in model.layers]
    first_param = next(i for i, s in enumerate(model.specs) if s.has_params)
    for idx in range(len(model.specs) - 1, -1, -1):
        spec, p, cache = model.specs[idx], model.layers[idx], caches[idx]
        kind = spec.kind
        if kind is LayerKind.CONV2D:
            cols, in_shape = cache
            d2 = dout.reshape(-1, spec.channels)
            grads[idx] = {"W": (cols.T @ d2).reshape(p["W"].shape), "b": d2.sum(axis=0)}
            if idx == first_param:
                break
            kh, kw = spec.kernel
            n, ho, wo, _ = dout.shape
            (pt, pb), (pl, pr) = _conv_padding(spec.kernel, spec.padding)
            dxp = np.zeros((n, in_shape[1] + pt + pb, in_shape[2] + pl + pr, in_shape[3]), dtype=dout.dtype)
            w = p["W"]
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + ho, j : j + wo, :] += dout @ w[i, j].T
            dout = dxp[:, pt : pt + in_shape[1], pl : pl + in_shape[2], :]
        elif kind is LayerKind.DENSE:
            x = cache
            grads[idx] = {"W": x.T @ dout, "b": dout.sum(axis=0)}
            if idx == first_param:
                break
            dout = dout @ p["W"].T
        elif kind is LayerKind.RELU:
            dout = np.multiply(dout, cache, out=dout if dout.flags.writeable else None)
        elif kind is LayerKind.DROPOUT:
            if cache is not None:
                keep, scale = cache
                dout = np.multiply(dout, keep, out=dout if dout.flags.writeable else None)
                dout *= scale
        elif kind is LayerKind.FLATTEN:
            dout = dout.reshape(cache)
    return grads


def forward(
    model: ModelParams,
    batch: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Raw logits, shape ``(N, num_classes)``."""
    logits, _ = _forward(model, _as_input(model, batch), train_mode, rng)
    return logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: Sequence[int] | np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the true class and its gradient wrt logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} logit rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def loss_and_grad(
    model: ModelParams,
    batch: np.ndarray,
    labels: Sequence[int] | np.ndarray,
    rng: np.random.Generator | None = None,
    train_mode: bool = True,
) -> tuple[float, Gradients]:
    x = _as_input(model, batch)
    logits, caches = _forward(model, x, train_mode, rng)
    loss, dlogits = cross_entropy(logits, labels)
    return loss, _backward(model, dlogits.astype(logits.dtype, copy=False), caches)


def backward(
    model: ModelParams,
    batch: np.ndarray,
    labels: Sequence[int] | np.ndarray,
    rng: np.random.Generator | None = None,
    train_mode: bool = True,
) -> Gradients:
    """Parameter gradients of the mean cross-entropy.

    Dropout masks are drawn from ``rng`` exactly as ``forward(..., train_mode=True)``
    would draw them, so a generator in the same state reproduces the paired pass.
    """
    return loss_and_grad(model, batch, labels, rng, train_mode)[1]


# -- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[dict[str, np.ndarray]] | None = field(default=None, repr=False)
    v: list[dict[str, np.ndarray]] | None = field(default=None, repr=False)


def _check_shapes(params: ModelParams, grads: Gradients) -> None:
    if len(grads) != len(params.layers):
        raise DimensionError(f"{len(grads)} gradient layers for {len(params.layers)} parameter layers")
    for idx, (p, g) in enumerate(zip(params.layers, grads)):
        if p.keys() != g.keys():
            raise DimensionError(f"layer {idx}: gradient keys {sorted(g)} != parameter keys {sorted(p)}")
        for k in p:
            if p[k].shape != g[k].shape:
                raise DimensionError(f"layer {idx} {k}: gradient shape {g[k].shape} != {p[k].shape}")


def sgd_step(params: ModelParams, grads: Gradients, state: OptimizerState) -> ModelParams:
    """In-place ``w <- w - lr * g``; returns ``params``."""
    _check_shapes(params, grads)
    for p, g in zip(params.layers, grads):
        for k in p:
            p[k] -= p[k].dtype.type(state.lr) * g[k]
    state.step += 1
    return params


def adam_step(params: ModelParams, grads: Gradients, state: OptimizerState) -> ModelParams:
    """In-place bias-corrected Adam update; returns ``params``."""
    _check_shapes(params, grads)
    if state.m is None:
        state.m = [{k: np.zeros_like(v) for k, v in layer.items()} for layer in params.layers]
        state.v = [{k: np.zeros_like(v) for k, v in layer.items()} for layer in params.layers]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr * np.sqrt(1.0 - b2**state.step) / (1.0 - b1**state.step)
    eps_hat = state.eps * np.sqrt(1.0 - b2**state.step)
    for p, g, m, v in zip(params.layers, grads, state.m, state.v):
        for k in p:
            mk, vk, gk = m[k], v[k], g[k]
            if mk.shape != p[k].shape:
                raise DimensionError("optimizer moments do not match parameter shapes")
            tmp = np.multiply(gk, 1.0 - b1, dtype=mk.dtype)
            mk *= b1
            mk += tmp
            np.multiply(gk, gk, out=tmp)
            tmp *= 1.0 - b2
            vk *= b2
            vk += tmp
            np.sqrt(vk, out=tmp)
            tmp += eps_hat
            np.divide(mk, tmp, out=tmp)
            tmp *= step_size
            p[k] -= tmp
    return params


def optimizer_step(params: ModelParams, grads: Gradients, state: OptimizerState) -> ModelParams:
    if state.kind == "adam":
        return adam_step(params, grads, state)
    if state.kind == "sgd":
        return sgd_step(params, grads, state)
    raise ValueError(f"unknown optimizer {state.kind!r}")


def fit(
    model: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    batch_size: int,
    state: OptimizerState,
    rng: np.random.Generator,
    *,
    prox_center: ModelParams | None = None,
    prox_mu: float = 0.0,
    on_epoch: Callable[[int, ModelParams], None] | None = None,
) -> ModelParams:
    """Mini-batch training in place.

    With ``prox_mu > 0`` the loss gains ``(mu / 2) * ||w - prox_center||^2``.
    """
    n = len(y)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grads = loss_and_grad(model, x[idx], y[idx], rng)
            if prox_mu > 0.0 and prox_center is not None:
                for g, p, c in zip(grads, model.layers, prox_center.layers):
                    for k in g:
                        g[k] = g[k] + p[k].dtype.type(prox_mu) * (p[k] - c[k])
            optimizer_step(model, grads, state)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model


# -- evaluation ---------------------------------------------------------------


@dataclass
class Evaluation:
    accuracy: float
    loss: float
    per_snr_accuracy: dict[int, float]


def predict(model: ModelParams, batch: np.ndarray, chunk: int = 1024) -> np.ndarray:
    out = [forward(model, batch[i : i + chunk]).argmax(axis=1) for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: ModelParams, dataset, chunk: int = 1024) -> Evaluation:
    """Accuracy, mean cross-entropy and per-SNR accuracy on ``dataset``.

    ``dataset`` needs ``iq``, ``labels`` and ``snr_db`` arrays.
    """
    iq, labels, snrs = dataset.iq, np.asarray(dataset.labels), np.asarray(dataset.snr_db)
    n = len(labels)
    if n == 0:
        raise EmptyInputError("cannot evaluate on an empty dataset")
    correct = np.empty(n, dtype=bool)
    loss_sum = 0.0
    for i in range(0, n, chunk):
        logits = forward(model, iq[i : i + chunk]).astype(np.float64)
        yb = labels[i : i + chunk]
        loss, _ = cross_entropy(logits, yb)
        loss_sum += loss * len(yb)
        correct[i : i + chunk] = logits.argmax(axis=1) == yb
    per_snr = {int(s): float(correct[snrs == s].mean()) for s in np.unique(snrs)}
    return Evaluation(float(correct.mean()), loss_sum / n, per_snr)


# -- checkpoint ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"FVNN"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: ModelParams, path: str | Path) -> None:
    """Write the parameter tensors; the u16 count is the number of tensors."""
    tensors = model.tensors()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HH", CHECKPOINT_VERSION, len(tensors))]
    for t in tensors:
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, template: ModelParams) -> ModelParams:
    """Read tensors into a copy of ``template`` (whose specs fix the architecture)."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(data) < 8:
        raise FormatError("truncated checkpoint header", len(data))
    version, count = struct.unpack_from("<HH", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    expected = template.tensors()
    if count != len(expected):
        raise FormatError(f"checkpoint has {count} tensors, model needs {len(expected)}", 6)
    off = 8
    out = []
    for ref in expected:
        if off + 1 > len(data):
            raise FormatError("truncated tensor header", off)
        rank = data[off]
        off += 1
        if off + 4 * rank > len(data):
            raise FormatError("truncated tensor dims", off)
        dims = struct.unpack_from(f"<{rank}I", data, off)
        if tuple(dims) != ref.shape:
            raise FormatError(f"tensor shape {dims} != expected {ref.shape}", off)
        off += 4 * rank
        nbytes = 4 * int(np.prod(dims))
        if off + nbytes > len(data):
            raise FormatError("truncated tensor payload", off)
        out.append(np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims).astype(ref.dtype))
        off += nbytes
    if off != len(data):
        raise FormatError("trailing bytes after last tensor", off)
    return template.with_tensors(out)
