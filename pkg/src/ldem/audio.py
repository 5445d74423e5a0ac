"""Waveform I/O, STFT front-end and a synthetic speech-like corpus.

The STFT uses a 1024-sample sine window with a hop of 256 samples (75%
overlap) and no zero-padding, giving F = 513 frequency bins.  Spectrograms
are stored as ``(F, T)`` complex arrays.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 16000
FRAME_LEN = 1024
HOP = 256
N_FREQ = FRAME_LEN // 2 + 1

# Below this window-power sum the overlap-add is attenuated instead of
# renormalized; the interior sum is 2 for sine/sine at 75% overlap.
_WSUM_FLOOR = 0.1


class AudioError(ValueError):
    """Invalid or degenerate audio data."""


class WavFormatError(AudioError):
    """The file is not a readable RIFF/WAVE file."""


class UnsupportedEncodingError(AudioError):
    """The WAV encoding is neither 16-bit PCM nor 32-bit float."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """STFT frames as an ``(F, T)`` complex array."""

    frames: np.ndarray
    frame_len: int = FRAME_LEN
    hop: int = HOP

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.complex128)
        if self.frames.ndim != 2:
            raise AudioError("spectrogram frames must be a 2-D (F, T) array")
        if self.frames.shape[0] != self.frame_len // 2 + 1:
            raise AudioError(
                f"expected {self.frame_len // 2 + 1} bins, got {self.frames.shape[0]}"
            )
        if self.frames.shape[1] < 1:
            raise AudioError("spectrogram has no frames")
        if not np.all(np.isfinite(self.frames)):
            raise AudioError("spectrogram contains non-finite coefficients")

    @property
    def n_freq(self) -> int:
        return self.frames.shape[0]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]

    @property
    def power(self) -> np.ndarray:
        return np.abs(self.frames) ** 2


def sine_window(n: int = FRAME_LEN) -> np.ndarray:
    return np.sin(np.pi * (np.arange(n) + 0.5) / n)


def n_frames_for(n_samples: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop + 1


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM or 32-bit float WAV file.

    Multichannel files are reduced to their first channel (with a warning).
    16-bit samples are scaled by ``2**-15``.
    """
    try:
        sr, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"{path}: unsupported sample type {data.dtype}")

    if samples.ndim == 2:
        if samples.shape[1] > 1:
            warnings.warn(
                f"{path}: {samples.shape[1]} channels, using channel 0", stacklevel=2
            )
        samples = samples[:, 0]
    if samples.size == 0:
        raise AudioError("empty audio")
    return Waveform(samples, int(sr))


def write_wav(path, w: Waveform, encoding: str = "pcm16") -> None:
    """Write ``w`` as mono WAV; ``encoding`` is ``"pcm16"`` or ``"float32"``.

    PCM output is clipped to the representable range.
    """
    samples = np.asarray(w.samples, dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise AudioError("waveform contains non-finite samples")
    if samples.size == 0:
        raise AudioError("empty audio")
    if encoding == "pcm16":
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = samples.astype(np.float32)
    else:
        raise UnsupportedEncodingError(f"unknown encoding {encoding!r}")
    wavfile.write(str(path), int(w.sample_rate), data)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


def stft(w: Waveform, frame_len: int = FRAME_LEN, hop: int = HOP) -> ComplexSpectrogram:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    n_frames = n_frames_for(len(x), frame_len, hop)
    if n_frames < 1:
        raise AudioError(
            f"signal of {len(x)} samples is shorter than one frame ({frame_len})"
        )
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = sine_window(frame_len) * x[idx]
    return ComplexSpectrogram(np.fft.rfft(frames, axis=1).T, frame_len, hop)


def istft(
    spec: ComplexSpectrogram, out_len: int, sample_rate: int = SAMPLE_RATE
) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Reconstruction is exact wherever the summed squared window is at least
    ``_WSUM_FLOOR``, which covers every sample except the outer ~100 at each
    end.
    """
    frame_len, hop = spec.frame_len, spec.hop
    n_frames = spec.n_frames
    if n_frames_for(out_len, frame_len, hop) != n_frames:
        raise AudioError(
            f"out_len={out_len} is inconsistent with {n_frames} frames "
            f"(frame_len={frame_len}, hop={hop})"
        )
    win = sine_window(frame_len)
    chunks = np.fft.irfft(spec.frames.T, n=frame_len, axis=1) * win
    out = np.zeros(out_len)
    wsum = np.zeros(out_len)
    for t in range(n_frames):
        sl = slice(t * hop, t * hop + frame_len)
        out[sl] += chunks[t]
        wsum[sl] += win**2
    out /= np.maximum(wsum, _WSUM_FLOOR)
    return Waveform(out, sample_rate)


def interior_slice(n_samples: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> slice:
    """Samples covered by the full ``frame_len / hop`` overlapping frames."""
    n_frames = n_frames_for(n_samples, frame_len, hop)
    return slice(frame_len - hop, (n_frames - 1) * hop + hop)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class CorpusSpec:
    n_utterances: int
    duration_s: float = 2.0
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    rms: float = 0.05

    def __post_init__(self):
        if self.n_utterances < 0:
            raise ValueError("n_utterances must be non-negative")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.duration_s * self.sample_rate < FRAME_LEN:
            raise ValueError("utterances must span at least one STFT frame")


def _syllable(rng: np.random.Generator, n: int, sr: int, f0_base: float) -> np.ndarray:
    """One voiced segment: gliding harmonic comb through a 2-pole resonator."""
    t = np.arange(n) / sr
    f_start, f_end = np.clip(f0_base * rng.uniform(0.75, 1.35, 2), 80.0, 300.0)
    f0 = f_start + (f_end - f_start) * t / max(t[-1], 1e-9)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    n_harm = int(0.45 * sr / max(f_start, f_end))
    k = np.arange(1, n_harm + 1)
    amps = np.exp(-rng.uniform(0.02, 0.25) * (k - 1)) * rng.uniform(0.3, 1.0, n_harm)
    src = np.sin(np.outer(phase, k) + rng.uniform(0, 2 * np.pi, n_harm)) @ amps

    fc = rng.uniform(300.0, 3000.0)
    bw = rng.uniform(80.0, 400.0)
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * fc / sr
    y = signal.lfilter([1.0 - r], [1.0, -2 * r * np.cos(theta), r * r], src)
    env = np.sin(np.pi * np.arange(n) / n) ** rng.uniform(0.5, 2.0)
    return y * env


def _synth_utterance(rng: np.random.Generator, n: int, sr: int, rms: float) -> np.ndarray:
    """Syllable train: per-syllable pitch glide, resonator and amplitude hump."""
    f0_base = rng.uniform(80.0, 300.0)
    y = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.1) * sr)
    while pos < n:
        length = int(rng.uniform(0.12, 0.35) * sr)
        seg = _syllable(rng, length, sr, f0_base) * rng.uniform(0.3, 1.0)
        stop = min(pos + length, n)
        y[pos:stop] += seg[: stop - pos]
        pos += int(length * rng.uniform(0.6, 1.0)) + int(rng.uniform(0.0, 0.15) * sr)

    y *= rms / (np.sqrt(np.mean(y**2)) + 1e-12)
    # Faint background so no frame has exactly zero power.
    y += 1e-3 * rms * rng.standard_normal(n)
    return y


def synth_corpus(spec: CorpusSpec) -> list[Waveform]:
    """Generate ``spec.n_utterances`` deterministic speech surrogates."""
    n = int(round(spec.duration_s * spec.sample_rate))
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_utterances)
    return [
        Waveform(
            _synth_utterance(np.random.default_rng(ss), n, spec.sample_rate, spec.rms),
            spec.sample_rate,
        )
        for ss in children
    ]


def load_wav_dir(path) -> list[Waveform]:
    """Read every ``*.wav`` file under ``path`` in sorted order."""
    files = sorted(Path(path).glob("**/*.wav"))
    return [read_wav(f) for f in files]


# ---------------------------------------------------------------------------
# Noise mixing
# ---------------------------------------------------------------------------


def active_power(x: np.ndarray, frame: int = 256, dyn_range_db: float = 40.0) -> float:
    """Mean power over frames within ``dyn_range_db`` of the loudest frame."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x) // frame
    if n == 0:
        return float(np.mean(x**2))
    p = np.mean(x[: n * frame].reshape(n, frame) ** 2, axis=1)
    keep = p > p.max() * 10 ** (-dyn_range_db / 10)
    return float(np.mean(p[keep]))


def white_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def colored_noise(n: int, rng: np.random.Generator, n_bands: int = 8) -> np.ndarray:
    """White noise shaped by a random piecewise-constant envelope over 8 bands."""
    spec = np.fft.rfft(rng.standard_normal(n))
    edges = np.linspace(0, spec.size, n_bands + 1).astype(int)
    gains = 10 ** (rng.uniform(-20.0, 0.0, n_bands) / 20)
    env = np.empty(spec.size)
    for b in range(n_bands):
        env[edges[b]:edges[b + 1]] = gains[b]
    return np.fft.irfft(spec * env, n=n)


def mix_at_snr(clean: Waveform, noise: np.ndarray, snr_db: float) -> Waveform:
    """Scale ``noise`` so that active-speech power over noise power is ``snr_db``."""
    noise = np.asarray(noise, dtype=np.float64)[: len(clean)]
    if noise.shape[0] != len(clean):
        raise AudioError("noise is shorter than the clean signal")
    p_s = active_power(clean.samples)
    p_n = float(np.mean(noise**2))
    if p_n == 0.0:
        raise AudioError("noise signal is all zeros")
    gain = np.sqrt(p_s / (p_n * 10 ** (snr_db / 10)))
    return Waveform(clean.samples + gain * noise, clean.sample_rate)
