"""Fully connected embedding heads with hand-written reverse mode."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError


@dataclass
class MLPHead:
    """Affine layers with ReLU between them and a linear output layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @classmethod
    def init(cls, layer_dims: Sequence[int], rng: np.random.Generator, scale: float | None = None) -> "MLPHead":
        """He-normal weights, zero biases."""
        if len(layer_dims) < 2:
            raise ShapeError("layer_dims needs an input and an output size")
        ws, bs = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            std = np.sqrt(2.0 / fan_in) if scale is None else scale
            ws.append(rng.standard_normal((fan_in, fan_out)) * std)
            bs.append(np.zeros(fan_out))
        return cls(ws, bs)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLPHead":
        return copy.deepcopy(self)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class Cache:
    inputs: list[np.ndarray] = field(default_factory=list)   # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)      # pre-activation of each layer

    @property
    def penultimate(self) -> np.ndarray:
        """Input of the last layer (post-ReLU hidden features)."""
        return self.inputs[-1]


def forward(head: MLPHead, x: np.ndarray) -> tuple[np.ndarray, Cache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.in_dim:
        raise ShapeError(f"batch shape {x.shape} does not match input dim {head.in_dim}")
    cache = Cache()
    h = x
    last = len(head.weights) - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return h, cache


def backward(head: MLPHead, cache: Cache, upstream: np.ndarray,
             penultimate_grad: np.ndarray | None = None) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients ``([dW0, db0, dW1, db1, ...], d_input)`` for a scalar loss.

    ``penultimate_grad`` adds an extra gradient arriving directly at the last
    layer's input (the hidden features), e.g. from a distillation branch.
    ReLU uses subgradient 0 at 0.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.pre[-1].shape:
        raise ShapeError(f"upstream gradient {g.shape} != output {cache.pre[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(head.weights))  # type: ignore[list-item]
    for i in range(len(head.weights) - 1, -1, -1):
        if i < len(head.weights) - 1:
            g = g * (cache.pre[i] > 0)
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ head.weights[i].T
        if i == len(head.weights) - 1 and penultimate_grad is not None:
            if penultimate_grad.shape != g.shape:
                raise ShapeError(f"penultimate gradient {penultimate_grad.shape} != {g.shape}")
            g = g + penultimate_grad
    return grads, g


def normalize_rows(x: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(x, axis=1), eps)
    return x / norms[:, None], norms


def normalize_rows_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``x / |x|`` back to ``x``."""
    radial = np.sum(unit * grad_unit, axis=1, keepdims=True)
    return (grad_unit - unit * radial) / norms[:, None]
