"""Minimal dense neural-network engine.

Float64 multilayer perceptrons (ReLU between layers, no activation after the
last), numerically stable log-softmax, cross-entropy against one-hot targets
with exact reverse-mode gradients, and bias-corrected Adam. Everything here
is a pure function over value types: inputs are never mutated, identical
inputs produce bit-identical outputs, and values can be shared across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


@dataclass
class Mlp:
    """Ordered (weight, bias) pairs; weight is (n, m), bias is (m,)."""

    layers: list

    @property
    def dims(self):
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def copy(self) -> "Mlp":
        return Mlp([(w.copy(), b.copy()) for w, b in self.layers])

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)


def init_mlp(dims, rng) -> Mlp:
    """Fan-in uniform init: weights and bias of each layer in [-1/sqrt(n), 1/sqrt(n)]."""
    if len(dims) < 2:
        raise ConfigError("an MLP needs at least one layer")
    layers = []
    for n, m in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(n)
        w = rng.uniform(-bound, bound, size=(n, m))
        b = rng.uniform(-bound, bound, size=m)
        layers.append((w, b))
    return Mlp(layers)


def zero_grads_like(mlp: Mlp):
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in mlp.layers]


def relu(x):
    return np.maximum(x, 0.0)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x @ w + b, with b broadcast across the batch dimension."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2:
        raise ConfigError(f"linear_forward expects 2-d arrays, got x{x.shape} w{w.shape}")
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ConfigError(f"shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b


def mlp_forward(mlp: Mlp, x: np.ndarray):
    """Forward pass. Returns (output, tape).

    The tape records each layer's input and is sufficient for an exact
    backward pass (ReLU masks are recovered from the rectified values).
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != mlp.layers[0][0].shape[0]:
        raise ConfigError(
            f"input {h.shape} does not match first layer ({mlp.layers[0][0].shape[0]} features)"
        )
    tape = []
    last = len(mlp.layers) - 1
    for i, (w, b) in enumerate(mlp.layers):
        tape.append(h)
        z = linear_forward(h, w, b)
        h = z if i == last else relu(z)
    return h, tape


def mlp_backward(mlp: Mlp, tape, grad_out):
    """Backward pass from d(loss)/d(output). Returns (per-layer grads, dx)."""
    grads = [None] * len(mlp.layers)
    d = np.asarray(grad_out, dtype=np.float64)
    for i in reversed(range(len(mlp.layers))):
        w, _ = mlp.layers[i]
        x_i = tape[i]
        grads[i] = (x_i.T @ d, d.sum(axis=0))
        d = d @ w.T
        if i > 0:
            # layer input equals the previous rectified output, so its sign
            # pattern is exactly the ReLU gradient mask
            d = d * (x_i > 0)
    return grads, d


def log_softmax(z, axis=-1):
    """log(softmax(z)) stabilized by max subtraction; exp of the result sums to 1."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InputError("log_softmax requires finite inputs")
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def check_one_hot(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise InputError(f"targets must be a 2-d one-hot matrix, got shape {y.shape}")
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)):
        raise InputError("target rows must be valid one-hot vectors")
    return y


def loss_and_grad(mlp: Mlp, x: np.ndarray, y_onehot: np.ndarray):
    """Mean cross-entropy of log-softmax outputs vs one-hot targets, with
    exact gradients shaped like the parameters."""
    y = check_one_hot(y_onehot)
    out, tape = mlp_forward(mlp, x)
    if out.shape != y.shape:
        raise InputError(f"output {out.shape} does not match targets {y.shape}")
    n = max(out.shape[0], 1)
    lp = log_softmax(out)
    loss = float(-(y * lp).sum() / n)
    dlogits = (np.exp(lp) - y) / n
    grads, _ = mlp_backward(mlp, tape, dlogits)
    return loss, grads


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter shapes."""

    m: list
    v: list
    t: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def adam_init(mlp: Mlp, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(zero_grads_like(mlp), zero_grads_like(mlp), 0, lr, beta1, beta2, eps)


def adam_update(mlp: Mlp, grads, state: AdamState):
    """One bias-corrected Adam step. Returns (new params, new state)."""
    if len(grads) != len(mlp.layers):
        raise ConfigError("gradient structure does not match parameters")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    layers, ms, vs = [], [], []
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(mlp.layers, grads, state.m, state.v):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ConfigError(f"gradient shape {gw.shape}/{gb.shape} does not match {w.shape}/{b.shape}")
        mw2 = b1 * mw + (1.0 - b1) * gw
        mb2 = b1 * mb + (1.0 - b1) * gb
        vw2 = b2 * vw + (1.0 - b2) * gw * gw
        vb2 = b2 * vb + (1.0 - b2) * gb * gb
        w2 = w - state.lr * (mw2 / c1) / (np.sqrt(vw2 / c2) + state.eps)
        b2_ = b - state.lr * (mb2 / c1) / (np.sqrt(vb2 / c2) + state.eps)
        layers.append((w2, b2_))
        ms.append((mw2, mb2))
        vs.append((vw2, vb2))
    return Mlp(layers), AdamState(ms, vs, t, state.lr, b1, b2, state.eps)
