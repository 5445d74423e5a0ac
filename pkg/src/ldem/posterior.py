"""Latent log-posterior g(z_t), its score, and the TV-regularized objective.

With v_ft = sigma^2_f(z_t) + (W H)_ft,

    g(z_t) = sum_f [ -log(pi) - log v_ft - |x_ft|^2 / v_ft ]
             - ||z_t||^2 / 2 - (L/2) log(2 pi)

and the regularized objective over a chain grid z (shape ``(m, T, L)``) is

    h(z) = sum_{i,t} g(z_{t,i}) + tv_sign * lambda * TV(z),

where TV sums the l1 distances between consecutive frames of each chain.
``tv_sign = -1`` (the default) makes TV a penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import ComplexSpectrogram
from .noise import NoiseParams, noise_variance
from .vae import LATENT_DIM, VaeParams, decode_backward_logvar, decode_forward

_LOG_PI = np.log(np.pi)
_LOG_2PI = np.log(2 * np.pi)


@dataclass
class ChainGrid:
    samples: np.ndarray  # (m, T, L)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 3 or self.samples.shape[0] < 1:
            raise ValueError(f"chain grid must be (m>=1, T, L), got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise FloatingPointError("chain grid contains non-finite values")

    @property
    def m(self) -> int:
        return self.samples.shape[0]

    @property
    def n_frames(self) -> int:
        return self.samples.shape[1]

    def mean(self) -> np.ndarray:
        """Chain average per frame, ``(T, L)``."""
        return self.samples.mean(axis=0)


@dataclass
class EmConfig:
    J: int = 100
    K: int = 10
    eta: float = 0.005
    sigma2: float = 0.01
    lam: float = 0.0
    m: int = 1
    nmf_rank: int = 8
    seed: int = 0
    tv_sign: float = -1.0
    peem_lr: float = 0.005
    mh_var: float = 0.01
    mh_iters: int = 40
    mh_burn: int = 30
    verbose: bool = False

    def __post_init__(self):
        if self.J < 1 or self.m < 1 or self.K < 0:
            raise ValueError("J and m must be at least 1 and K non-negative")
        if self.eta <= 0 or self.sigma2 <= 0:
            raise ValueError("eta and sigma2 must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.nmf_rank < 1:
            raise ValueError("rank must be positive")
        if self.tv_sign not in (-1.0, 1.0):
            raise ValueError("tv_sign must be -1 or +1")
        if self.mh_var < 0 or not 0 <= self.mh_burn < self.mh_iters:
            raise ValueError("need mh_var >= 0 and 0 <= mh_burn < mh_iters")

    @property
    def mh_keep(self) -> int:
        return self.mh_iters - self.mh_burn


# ---------------------------------------------------------------------------
# Batched kernels.  ``power`` and ``noise_var`` are (T, F); z is (..., T, L).
# Leading chain axes are looped over so that working arrays stay (T, F).
# ---------------------------------------------------------------------------


def _prior_terms(z, n_freq):
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * _LOG_2PI - n_freq * _LOG_PI


def _log_joint_rows(z, power, vae, noise_var):
    v, _ = decode_forward(vae, z)
    v += noise_var
    acc = np.log(v).sum(axis=-1)
    np.divide(power, v, out=v)
    acc += v.sum(axis=-1)
    return _prior_terms(z, power.shape[-1]) - acc


def _score_rows(z, power, vae, noise_var, with_value):
    s2, hidden = decode_forward(vae, z)
    inv = s2 + noise_var
    if with_value:
        value = -np.log(inv).sum(axis=-1)
    np.reciprocal(inv, out=inv)
    # dg/dlog(s2) = s2 * (|x|^2 / v - 1) / v
    d = power * inv
    if with_value:
        value -= d.sum(axis=-1)
        value += _prior_terms(z, power.shape[-1])
    d -= 1.0
    d *= inv
    d *= s2
    grad = decode_backward_logvar(vae, hidden, d) - z
    return (grad, value) if with_value else grad


def _over_chains(fn, z, *args):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim <= 2:
        return fn(z, *args)
    lead = z.shape[:-2]
    flat = z.reshape((-1,) + z.shape[-2:])
    parts = [fn(zi, *args) for zi in flat]
    if isinstance(parts[0], tuple):
        return tuple(np.stack(p).reshape(lead + p[0].shape) for p in zip(*parts))
    return np.stack(parts).reshape(z.shape[:-2] + parts[0].shape)


def batch_log_joint(z, power, vae: VaeParams, noise_var) -> np.ndarray:
    """g evaluated at every latent vector in ``z``; returns shape ``z.shape[:-1]``."""
    return _over_chains(_log_joint_rows, z, power, vae, noise_var)


def batch_score(z, power, vae: VaeParams, noise_var, with_value: bool = False):
    """Gradient of g w.r.t. each latent vector (and optionally g itself)."""
    return _over_chains(_score_rows, z, power, vae, noise_var, with_value)


# ---------------------------------------------------------------------------
# Per-frame API
# ---------------------------------------------------------------------------


def _frame_inputs(z_t, x_t, noise: NoiseParams, t):
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.shape != (LATENT_DIM,) or not np.all(np.isfinite(z_t)):
        raise ValueError("z_t must be a finite vector of length 32")
    power = np.abs(np.asarray(x_t)) ** 2
    return z_t, power, noise_variance(noise, t)


def log_joint(z_t, x_t, vae: VaeParams, noise: NoiseParams, t: int) -> float:
    """log p(x_t | z_t) + log p(z_t) for one frame."""
    z_t, power, nv = _frame_inputs(z_t, x_t, noise, t)
    g = float(batch_log_joint(z_t, power, vae, nv))
    if not np.isfinite(g):
        raise FloatingPointError(f"non-finite log-joint at frame {t}")
    return g


def score(z_t, x_t, vae: VaeParams, noise: NoiseParams, t: int) -> np.ndarray:
    """Gradient of :func:`log_joint` w.r.t. ``z_t``."""
    z_t, power, nv = _frame_inputs(z_t, x_t, noise, t)
    grad = batch_score(z_t, power, vae, nv)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite score at frame {t}")
    return grad


# ---------------------------------------------------------------------------
# Total variation
# ---------------------------------------------------------------------------


def frame_power(x) -> np.ndarray:
    """|x|^2 laid out frame-major ``(T, F)``; ``x`` is a spectrogram or complex ``(F, T)`` array."""
    frames = x.frames if isinstance(x, ComplexSpectrogram) else np.asarray(x)
    return np.ascontiguousarray(np.abs(frames.T) ** 2)


def _samples(grid) -> np.ndarray:
    return grid.samples if isinstance(grid, ChainGrid) else np.asarray(grid, dtype=np.float64)


def tv_value(grid) -> float:
    """Sum over chains of the l1 temporal variation of each chain."""
    z = _samples(grid)
    return float(np.abs(np.diff(z, axis=1)).sum())


def tv_subgradient(z: np.ndarray) -> np.ndarray:
    """Subgradient of TV with sign(0) = 0; missing neighbours contribute 0."""
    sub = np.zeros_like(z)
    step = np.sign(np.diff(z, axis=1))  # sign(z_t - z_{t-1}), t = 1..T-1
    sub[:, 1:] += step
    sub[:, :-1] -= step
    return sub


def regularized_score(
    grid,
    x,
    vae: VaeParams,
    noise: NoiseParams,
    lam: float,
    tv_sign: float = -1.0,
) -> np.ndarray:
    """Gradient of h over the whole grid, shape ``(m, T, L)``.

    All cells are evaluated from the same snapshot of the grid.
    """
    z = _samples(grid)
    grad = batch_score(z, frame_power(x), vae, noise.variance_tf())
    if lam != 0:
        grad = grad + (tv_sign * lam) * tv_subgradient(z)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite regularized score")
    return grad
