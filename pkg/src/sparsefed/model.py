"""Manually-differentiated feed-forward classifier with mask-aware passes.

A model is a flat f64 weight vector plus per-layer dense biases, laid out by a
LayerLayout. Supported shapes: a stack of linear layers with ReLU between them,
optionally preceded by a single conv layer (stride 1, valid padding). Forward
and backward apply the mask to the weights before any arithmetic, so inactive
coordinates contribute nothing and their gradient entries are exactly zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .masks import LayerLayout, Mask, apply_mask


@dataclass(frozen=True)
class ModelParams:
    """Flat weight vector + dense per-layer biases."""

    values: np.ndarray  # f64, length = layout.total_count
    layout: LayerLayout
    biases: tuple[np.ndarray, ...]  # one per layer, length = fan_out

    def __post_init__(self):
        if self.values.shape != (self.layout.total_count,):
            raise ValueError("values length does not match layout")
        if len(self.biases) != len(self.layout.layers):
            raise ValueError("one bias vector per layer required")
        for spec, b in zip(self.layout.layers, self.biases):
            if b.shape != (spec.fan_out,):
                raise ValueError(f"bias shape {b.shape} does not match fan_out {spec.fan_out}")
        self.values.setflags(write=False)
        for b in self.biases:
            b.setflags(write=False)

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.layout, tuple(b.copy() for b in self.biases))

    def masked(self, mask: Mask) -> "ModelParams":
        return ModelParams(apply_mask(self.values, mask), self.layout, self.biases)

    def check_finite(self):
        if not np.isfinite(self.values).all() or not all(np.isfinite(b).all() for b in self.biases):
            raise FloatingPointError("non-finite model parameters")

    @staticmethod
    def init_random(layout: LayerLayout, seed) -> "ModelParams":
        """He-style init scaled by fan-in; biases start at zero."""
        rng = np.random.default_rng(seed)
        values = np.empty(layout.total_count)
        biases = []
        for spec, sl in zip(layout.layers, layout.slices()):
            if spec.kind == "linear":
                fan_in = spec.shape[0]
            else:
                cin, _, kh, kw = spec.shape
                fan_in = cin * kh * kw
            values[sl] = rng.normal(0.0, np.sqrt(2.0 / fan_in), spec.count)
            biases.append(np.zeros(spec.fan_out))
        return ModelParams(values, layout, tuple(biases))

    # --- checkpoint format: flat little-endian f64 + JSON sidecar ---------

    def save(self, path):
        flat = np.concatenate([self.values] + [b for b in self.biases])
        with open(path, "wb") as fh:
            fh.write(flat.astype("<f8").tobytes())
        sidecar = {"layout": self.layout.to_dict(),
                   "bias_counts": [len(b) for b in self.biases]}
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh)

    @staticmethod
    def load(path) -> "ModelParams":
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
        layout = LayerLayout.from_dict(sidecar["layout"])
        flat = np.frombuffer(open(path, "rb").read(), dtype="<f8").astype(np.float64)
        values = flat[: layout.total_count]
        biases = []
        off = layout.total_count
        for n in sidecar["bias_counts"]:
            biases.append(flat[off: off + n].copy())
            off += n
        if off != len(flat):
            raise ValueError("checkpoint length does not match sidecar")
        return ModelParams(values.copy(), layout, tuple(biases))


@dataclass(frozen=True)
class Batch:
    """Inputs (batch x features, or batch x C x H x W for conv nets) + integer labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.labels) or len(self.labels) < 1:
            raise ValueError("inputs and labels must align and be non-empty")


@dataclass(frozen=True)
class GradResult:
    grad: np.ndarray  # flat, aligned with layout, zero at inactive coords
    bias_grads: tuple[np.ndarray, ...]
    loss: float
    correct: int


def _conv_forward(x, w):
    # x: (B, Cin, H, W); w: (Cin, Cout, kh, kw); valid padding, stride 1
    kh, kw = w.shape[2], w.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # win: (B, Cin, outH, outW, kh, kw)
    z = np.einsum("bcijuv,couv->boij", win, w)
    return z, win


def _conv_backward(dz, win, w, x_shape):
    dw = np.einsum("bcijuv,boij->couv", win, dz)
    kh, kw = w.shape[2], w.shape[3]
    dzp = np.pad(dz, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    winz = np.lib.stride_tricks.sliding_window_view(dzp, (kh, kw), axis=(2, 3))
    wf = w[:, :, ::-1, ::-1]
    dx = np.einsum("boyxuv,couv->bcyx", winz, wf)
    assert dx.shape == x_shape
    return dw, dx


def _forward_internals(params: ModelParams, mask: Mask, batch: Batch):
    masked = apply_mask(params.values, mask)
    a = np.asarray(batch.inputs, dtype=np.float64)
    caches = []
    n_layers = len(params.layout.layers)
    for j, (spec, sl) in enumerate(zip(params.layout.layers, params.layout.slices())):
        if spec.kind == "linear":
            if a.ndim > 2:
                a = a.reshape(len(a), -1)
            w = masked[sl].reshape(spec.shape)
            if a.shape[1] != spec.shape[0]:
                raise ValueError(f"layer {j}: input width {a.shape[1]} != fan_in {spec.shape[0]}")
            z = a @ w + params.biases[j]
            caches.append(("linear", a, w))
        else:
            if a.ndim != 4 or a.shape[1] != spec.shape[0]:
                raise ValueError(f"layer {j}: conv input must be (B, {spec.shape[0]}, H, W)")
            w = masked[sl].reshape(spec.shape)
            z, win = _conv_forward(a, w)
            z = z + params.biases[j][None, :, None, None]
            caches.append(("conv", a, w, win))
        if j < n_layers - 1:
            a = np.maximum(z, 0.0)
            caches.append(("relu", z))
    return z, caches


def _loss_and_correct(logits: np.ndarray, labels: np.ndarray):
    zmax = logits.max(axis=1, keepdims=True)
    shifted = logits - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(lse - shifted[rows, labels]))
    correct = int((logits.argmax(axis=1) == labels).sum())
    return loss, correct


def forward(params: ModelParams, mask: Mask, batch: Batch):
    """Masked forward pass. Returns (logits, mean cross-entropy, correct count)."""
    logits, _ = _forward_internals(params, mask, batch)
    loss, correct = _loss_and_correct(logits, batch.labels)
    return logits, loss, correct


def backward(params: ModelParams, mask: Mask, batch: Batch) -> GradResult:
    """Analytic gradient of the masked network's mean loss, re-masked on output."""
    logits, caches = _forward_internals(params, mask, batch)
    labels = np.asarray(batch.labels)
    loss, correct = _loss_and_correct(logits, labels)

    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(len(labels)), labels] -= 1.0
    dz = probs / len(labels)

    grad = np.zeros(params.layout.total_count)
    bias_grads = [None] * len(params.layout.layers)
    j = len(params.layout.layers) - 1
    slices = params.layout.slices()
    while caches:
        entry = caches.pop()
        if entry[0] == "relu":
            dz = dz.reshape(entry[1].shape) * (entry[1] > 0.0)
            continue
        if entry[0] == "linear":
            _, a, w = entry
            if dz.ndim > 2:
                dz = dz.reshape(len(dz), -1)
            grad[slices[j]] = (a.T @ dz).ravel()
            bias_grads[j] = dz.sum(axis=0)
            dz = dz @ w.T
        else:
            _, a, w, win = entry
            if dz.ndim == 2:
                dz = dz.reshape(len(dz), w.shape[1], win.shape[2], win.shape[3])
            bias_grads[j] = dz.sum(axis=(0, 2, 3))
            dw, dz = _conv_backward(dz, win, w, a.shape)
            grad[slices[j]] = dw.ravel()
        j -= 1

    grad = apply_mask(grad, mask)
    return GradResult(grad, tuple(bias_grads), loss, correct)


def sgd_step(params: ModelParams, mask: Mask, grad: GradResult,
             lr: float, weight_decay: float = 0.0) -> ModelParams:
    """One masked SGD step: active weights get w - lr*(g + wd*w); biases dense, undecayed."""
    if lr < 0.0:
        raise ValueError("learning rate must be non-negative")
    values = params.values.copy()
    m = mask.bits
    values[m] -= lr * (grad.grad[m] + weight_decay * params.values[m])
    biases = tuple(b - lr * gb for b, gb in zip(params.biases, grad.bias_grads))
    return ModelParams(values, params.layout, biases)


def flops_forward(mask: Mask, batch_size: int) -> int:
    """2 * active weights per layer per sample, plus dense bias adds."""
    active = mask.active_per_layer
    bias_adds = sum(spec.fan_out for spec in mask.layout.layers)
    return int(batch_size * (2 * int(active.sum()) + bias_adds))


def flops_train_step(mask: Mask, batch_size: int) -> int:
    """Forward + backward accounted as 3x the forward cost."""
    return 3 * flops_forward(mask, batch_size)
