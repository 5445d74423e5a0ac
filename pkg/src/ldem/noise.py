"""NMF noise variance model and its multiplicative M-step.

The noise frame b_t is a circular complex Gaussian with variance
``(W @ H)[:, t]``.  Given speech variances from m posterior samples per
frame, the M-step decreases

    C(W, H) = (1/m) sum_{i,f,t} [ |x_ft|^2 / v_ift + log v_ift ],
    v_ift   = speech_var_ift + (W H)_ft

with the Itakura-Saito style majorize-minimize rules (exponent 1/2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import ComplexSpectrogram

NMF_FLOOR = 1e-12


@dataclass
class NoiseParams:
    W: np.ndarray  # (F, r)
    H: np.ndarray  # (r, T)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.H = np.asarray(self.H, dtype=np.float64)
        if self.W.ndim != 2 or self.H.ndim != 2 or self.W.shape[1] != self.H.shape[0]:
            raise ValueError(f"inconsistent NMF shapes {self.W.shape} / {self.H.shape}")

    @property
    def rank(self) -> int:
        return self.W.shape[1]

    @property
    def n_frames(self) -> int:
        return self.H.shape[1]

    def variance(self) -> np.ndarray:
        """Full ``(F, T)`` noise variance ``W @ H``."""
        return self.W @ self.H

    def variance_tf(self) -> np.ndarray:
        """The same variance laid out frame-major, ``(T, F)`` and contiguous."""
        return self.H.T @ self.W.T

    def copy(self) -> "NoiseParams":
        return NoiseParams(self.W.copy(), self.H.copy())


def noise_variance(noise: NoiseParams, t: int) -> np.ndarray:
    if not 0 <= t < noise.n_frames:
        raise IndexError(f"frame {t} out of range [0, {noise.n_frames})")
    return noise.W @ noise.H[:, t]


def init_noise(x: ComplexSpectrogram, r: int = 8, seed: int = 0) -> NoiseParams:
    """Uniform(0, 1) factors rescaled so that ``mean(W H) == mean(|x|^2)``."""
    if r < 1:
        raise ValueError("rank must be positive")
    rng = np.random.default_rng(seed)
    F, T = x.frames.shape
    W = rng.uniform(0.0, 1.0, size=(F, r))
    H = rng.uniform(0.0, 1.0, size=(r, T))
    W = np.maximum(W, NMF_FLOOR)
    H = np.maximum(H, NMF_FLOOR)
    target = max(float(np.mean(x.power)), NMF_FLOOR)
    scale = np.sqrt(target / np.mean(W @ H))
    return NoiseParams(np.maximum(W * scale, NMF_FLOOR), np.maximum(H * scale, NMF_FLOOR))


def _power(x) -> np.ndarray:
    if isinstance(x, ComplexSpectrogram):
        return x.power
    return np.asarray(x, dtype=np.float64)


def m_step_cost(noise: NoiseParams, x, speech_vars: np.ndarray) -> float:
    """C(W, H) for speech variances ``speech_vars`` of shape ``(m, T, F)``."""
    power = _power(x)
    v = speech_vars + noise.variance().T[None]
    cost = float(np.sum(power.T[None] / v + np.log(v)) / speech_vars.shape[0])
    if not np.isfinite(cost):
        raise FloatingPointError("non-finite M-step cost")
    return cost


def _moments(power_tf, speech_vars, wh_tf):
    """Sum over samples of P / V^2 and 1 / V, both returned as ``(F, T)``."""
    inv_sum = np.zeros_like(wh_tf)
    inv2_sum = np.zeros_like(wh_tf)
    buf = np.empty_like(wh_tf)
    for sv in speech_vars:
        np.add(sv, wh_tf, out=buf)
        np.reciprocal(buf, out=buf)
        inv_sum += buf
        buf *= buf
        inv2_sum += buf
    inv2_sum *= power_tf
    return inv2_sum.T, inv_sum.T


def m_step(noise: NoiseParams, x, speech_vars: np.ndarray) -> NoiseParams:
    """One multiplicative sweep: update W, recompute V, then update H.

    ``x`` is the observed spectrogram (or its ``(F, T)`` power) and
    ``speech_vars`` the decoded variances, shape ``(m, T, F)``.
    """
    power = _power(x)
    speech_vars = np.asarray(speech_vars, dtype=np.float64)
    if speech_vars.ndim != 3 or speech_vars.shape[1:] != power.T.shape:
        raise ValueError(
            f"speech_vars shape {speech_vars.shape} incompatible with power {power.shape}"
        )
    if not np.all(speech_vars > 0):
        raise ValueError("speech variances must be positive")
    W, H = noise.W, noise.H
    pt = power.T

    num, den = _moments(pt, speech_vars, NoiseParams(W, H).variance_tf())
    W = np.maximum(W * np.sqrt((num @ H.T) / (den @ H.T)), NMF_FLOOR)

    num, den = _moments(pt, speech_vars, NoiseParams(W, H).variance_tf())
    H = np.maximum(H * np.sqrt((W.T @ num) / (W.T @ den)), NMF_FLOOR)

    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(H))):
        raise FloatingPointError("non-finite NMF factors after M-step")
    return NoiseParams(W, H)
