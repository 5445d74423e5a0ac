"""Posterior-mean speech estimate, the end-to-end pipeline, and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd

import numpy as np
from scipy.signal import resample_poly

from .audio import AudioError, ComplexSpectrogram, Waveform, istft, stft
from .noise import NoiseParams
from .posterior import ChainGrid, EmConfig
from .samplers import run_solver
from .vae import VaeParams, decode

SI_SDR_CAP = 100.0


@dataclass
class EnhanceResult:
    enhanced: Waveform
    wiener_gains: np.ndarray  # (F, T)
    noise: NoiseParams
    diagnostics: list = field(default_factory=list)
    final_tv: float = 0.0


def wiener_gains(grid: ChainGrid, vae: VaeParams, noise: NoiseParams) -> np.ndarray:
    """Monte-Carlo average over chains of sigma_s^2 / (sigma_s^2 + WH), ``(F, T)``."""
    s2 = decode(vae, grid.samples)  # (m, T, F)
    wh = noise.variance_tf()
    if s2.shape[1:] != wh.shape:
        raise ValueError(f"grid {grid.samples.shape} inconsistent with noise {wh.shape}")
    return np.mean(s2 / (s2 + wh[None]), axis=0).T


def posterior_mean(
    x: ComplexSpectrogram, grid: ChainGrid, vae: VaeParams, noise: NoiseParams
) -> ComplexSpectrogram:
    gains = wiener_gains(grid, vae, noise)
    if gains.shape != x.frames.shape:
        raise ValueError(f"gains {gains.shape} inconsistent with x {x.frames.shape}")
    return ComplexSpectrogram(gains * x.frames, x.frame_len, x.hop)


def enhance_file(
    noisy: Waveform, vae: VaeParams, cfg: EmConfig, method: str = "ldem", sink=None
) -> EnhanceResult:
    """STFT -> EM solver -> posterior mean -> inverse STFT at the input length."""
    x = stft(noisy)
    noise, result = run_solver(method, x, vae, cfg, sink)
    gains = wiener_gains(result.grid, vae, noise)
    s_hat = ComplexSpectrogram(gains * x.frames, x.frame_len, x.hop)
    return EnhanceResult(
        enhanced=istft(s_hat, len(noisy), noisy.sample_rate),
        wiener_gains=gains,
        noise=noise,
        diagnostics=result.diagnostics,
        final_tv=result.final_tv,
    )


# ---------------------------------------------------------------------------
# SI-SDR
# ---------------------------------------------------------------------------


def _samples(w) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, clipped to +-100 dB."""
    s = _samples(reference)
    s_hat = _samples(estimate)
    if s.shape != s_hat.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {s_hat.shape}")
    ref_energy = float(np.dot(s, s))
    if ref_energy == 0.0:
        raise ValueError("reference signal is all zeros")
    alpha = float(np.dot(s_hat, s)) / ref_energy
    target = alpha * s
    err = s_hat - target
    num = float(np.dot(target, target))
    den = float(np.dot(err, err))
    if den == 0.0 or num > den * 10 ** (SI_SDR_CAP / 10):
        return SI_SDR_CAP
    if num == 0.0 or num < den * 10 ** (-SI_SDR_CAP / 10):
        return -SI_SDR_CAP
    return 10.0 * np.log10(num / den)


# ---------------------------------------------------------------------------
# STOI (standard, non-extended form)
# ---------------------------------------------------------------------------

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40
_EPS = np.finfo(float).eps


def third_octave_bands(fs=STOI_FS, nfft=STOI_NFFT, n_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """Binary one-third-octave band matrix ``(n_bands, nfft/2+1)`` and centre frequencies."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands, dtype=float)
    centres = 2.0 ** (k / 3) * min_freq
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm, centres


def _stoi_window():
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _frame_starts(n, framelen, hop):
    return range(0, n - framelen, hop)


def _remove_silent_frames(x, y):
    w = _stoi_window()
    hop = STOI_FRAME // 2
    starts = list(_frame_starts(len(x), STOI_FRAME, hop))
    if not starts:
        return x[:0], y[:0]
    xf = np.array([w * x[i:i + STOI_FRAME] for i in starts])
    yf = np.array([w * y[i:i + STOI_FRAME] for i in starts])
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    mask = (energy.max() - STOI_DYN_RANGE - energy) < 0
    xf, yf = xf[mask], yf[mask]

    def ola(frames):
        out = np.zeros((len(frames) - 1) * hop + STOI_FRAME)
        for i, fr in enumerate(frames):
            out[i * hop:i * hop + STOI_FRAME] += fr
        return out

    return ola(xf), ola(yf)


def _stoi_stft(x):
    w = _stoi_window()
    hop = STOI_FRAME // 2
    return np.array(
        [np.fft.rfft(w * x[i:i + STOI_FRAME], n=STOI_NFFT) for i in _frame_starts(len(x), STOI_FRAME, hop)]
    )


def stoi(reference, estimate, sample_rate: int | None = None) -> float:
    """Short-time objective intelligibility of ``estimate`` against ``reference``.

    Signals are resampled to 10 kHz; silent frames (more than 40 dB below
    the loudest reference frame) are removed first.  At least 384 ms of
    active speech (30 analysis frames) is required.
    """
    if sample_rate is None:
        sample_rate = reference.sample_rate if isinstance(reference, Waveform) else 16000
    x = _samples(reference)
    y = _samples(estimate)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if sample_rate != STOI_FS:
        g = gcd(STOI_FS, int(sample_rate))
        x = resample_poly(x, STOI_FS // g, int(sample_rate) // g)
        y = resample_poly(y, STOI_FS // g, int(sample_rate) // g)

    x, y = _remove_silent_frames(x, y)
    x_spec = _stoi_stft(x)
    y_spec = _stoi_stft(y)
    if x_spec.shape[0] < STOI_SEGMENT:
        raise AudioError(
            f"STOI needs at least {STOI_SEGMENT} active frames (384 ms), got {x_spec.shape[0]}"
        )
    obm, _ = third_octave_bands()
    x_tob = np.sqrt(obm @ (np.abs(x_spec) ** 2).T)
    y_tob = np.sqrt(obm @ (np.abs(y_spec) ** 2).T)

    n = x_tob.shape[1]
    xs = np.stack([x_tob[:, m - STOI_SEGMENT:m] for m in range(STOI_SEGMENT, n + 1)])
    ys = np.stack([y_tob[:, m - STOI_SEGMENT:m] for m in range(STOI_SEGMENT, n + 1)])

    norm = np.linalg.norm(xs, axis=2, keepdims=True) / (
        np.linalg.norm(ys, axis=2, keepdims=True) + _EPS
    )
    clip = 10 ** (-STOI_BETA / 20)
    yp = np.minimum(ys * norm, xs * (1 + clip))
    yp = yp - yp.mean(axis=2, keepdims=True)
    xs = xs - xs.mean(axis=2, keepdims=True)
    yp /= np.linalg.norm(yp, axis=2, keepdims=True) + _EPS
    xs /= np.linalg.norm(xs, axis=2, keepdims=True) + _EPS
    return float(np.sum(yp * xs) / (xs.shape[0] * xs.shape[1]))
