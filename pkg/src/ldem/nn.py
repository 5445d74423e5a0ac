"""Dense layers, elementwise activations and Adam, with explicit backward passes.

Batched inputs are row-major: an input of shape ``(N, in)`` maps to an
output of shape ``(N, out)``.  Single vectors are accepted as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "DenseLayer":
        """Uniform(-1/sqrt(n_in), 1/sqrt(n_in)) for both weight and bias."""
        bound = 1.0 / np.sqrt(n_in)
        return cls(
            rng.uniform(-bound, bound, size=(n_out, n_in)),
            rng.uniform(-bound, bound, size=n_out),
        )

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy())


def _check_input(layer: DenseLayer, x: np.ndarray):
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"layer expects {layer.n_in} inputs, got {x.shape[-1]}")


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_input(layer, x)
    return x @ layer.weight.T + layer.bias


def dense_backward(layer: DenseLayer, x: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_weight, grad_bias, grad_input)``.

    For batched inputs the parameter gradients are summed over rows.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _check_input(layer, x)
    if grad_out.shape[-1] != layer.n_out or grad_out.shape[:-1] != x.shape[:-1]:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match output of input {x.shape}"
        )
    g2 = grad_out.reshape(-1, layer.n_out)
    x2 = x.reshape(-1, layer.n_in)
    grad_weight = g2.T @ x2
    grad_bias = g2.sum(axis=0)
    grad_input = grad_out @ layer.weight
    return grad_weight, grad_bias, grad_input


def dense_input_grad(layer: DenseLayer, grad_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the layer input only (skips the parameter gradients)."""
    return grad_out @ layer.weight


def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(out, grad_out):
    """``out`` is the forward output ``tanh(x)``."""
    return grad_out * (1.0 - out * out)


def exp_forward(x):
    return np.exp(x)


def exp_backward(out, grad_out):
    """``out`` is the forward output ``exp(x)``."""
    return grad_out * out


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update (minimization).

    ``params`` and ``grads`` are equal-length sequences of arrays.  Returns
    new parameter arrays and the advanced state; inputs are not modified.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"param shape {np.shape(p)} != grad shape {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient passed to adam_step")

    m = state.first_moment or [np.zeros_like(p, dtype=np.float64) for p in params]
    v = state.second_moment or [np.zeros_like(p, dtype=np.float64) for p in params]
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = b1 * mi + (1.0 - b1) * g
        vi = b2 * vi + (1.0 - b2) * g * g
        step = state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps)
        new_params.append(p - step)
        new_m.append(mi)
        new_v.append(vi)

    new_state = AdamState(
        lr=state.lr,
        beta1=b1,
        beta2=b2,
        eps=state.eps,
        step_count=t,
        first_moment=new_m,
        second_moment=new_v,
    )
    return new_params, new_state
