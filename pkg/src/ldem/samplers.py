"""E-step solvers and the EM loops built on them.

* :func:`ldem` - multi-chain Langevin dynamics with optional TV coupling,
  warm-started from the chain average of the previous EM iteration.
* :func:`peem` - point estimate: a few Adam ascent steps on sum_t g(z_t).
* :func:`mcem` - random-walk Metropolis-Hastings per frame.

All three share the M-step of :mod:`ldem.noise` and are deterministic
functions of their inputs and ``cfg.seed``.
"""

from __future__ import annotations

import json
import sys
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .audio import ComplexSpectrogram
from .nn import AdamState, adam_step
from .noise import NoiseParams, init_noise, m_step
from .posterior import (
    ChainGrid,
    EmConfig,
    frame_power,
    batch_log_joint,
    batch_score,
    tv_subgradient,
    tv_value,
)
from .vae import VaeParams, decode_forward, encode

METHODS = ("ldem", "peem", "mcem")


class RngStream:
    """Seeded normal/uniform source; ``child(k)`` gives an independent stream."""

    def __init__(self, seed: int, stream: tuple = ()):
        self.seed = int(seed)
        self.stream = tuple(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, key: int) -> "RngStream":
        return RngStream(self.seed, self.stream + (int(key),))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)


def _as_rng(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(0 if rng is None else rng)


@dataclass
class EStepResult:
    grid: ChainGrid
    diagnostics: list = field(default_factory=list)

    @property
    def final_tv(self) -> float:
        """Per-chain mean TV of the final grid."""
        return tv_value(self.grid) / self.grid.m

    def mean_g(self) -> np.ndarray:
        return np.array([d["mean_g"] for d in self.diagnostics])


def _emit(cfg: EmConfig, record: dict, sink=None):
    if cfg.verbose:
        print(json.dumps(record), file=sink or sys.stderr)


# ---------------------------------------------------------------------------
# Generic kernels
# ---------------------------------------------------------------------------


def langevin(z, grad_fn, K, eta, rng, callback: Optional[Callable] = None):
    """K unadjusted Langevin steps z <- z + eta/2 grad(z) + sqrt(eta) N(0, I)."""
    rng = _as_rng(rng)
    z = np.array(z, dtype=np.float64)
    half, noise_scale = 0.5 * eta, np.sqrt(eta)
    for k in range(1, K + 1):
        z = z + half * grad_fn(z) + noise_scale * rng.normal(z.shape)
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"Langevin state became non-finite at iteration {k}")
        if callback is not None:
            callback(k, z)
    return z


def adam_ascent(z, grad_fn, K, lr, state: Optional[AdamState] = None):
    """K Adam steps maximizing the objective whose gradient is ``grad_fn``."""
    state = state if state is not None else AdamState(lr=lr)
    params = [np.array(z, dtype=np.float64)]
    for _ in range(K):
        params, state = adam_step(params, [-grad_fn(params[0])], state)
    return params[0], state


def metropolis_hastings(z, log_target, n_iter, proposal_var, rng, callback=None):
    """Row-wise random-walk MH on ``z`` of shape ``(N, L)``.

    ``log_target(z)`` returns ``(logp, aux)`` with one value (and one row of
    ``aux``, or ``aux=None``) per row of ``z``.  Each row is accepted
    independently.  ``callback(n, z, aux, accepted)`` sees every state.
    Returns ``(z, aux, acceptance_rate)``.
    """
    rng = _as_rng(rng)
    z = np.array(z, dtype=np.float64)
    logp, aux = log_target(z)
    scale = np.sqrt(proposal_var)
    n_acc = 0
    for n in range(n_iter):
        zp = z + scale * rng.normal(z.shape)
        logp_p, aux_p = log_target(zp)
        acc = np.log(rng.uniform(logp.shape)) < logp_p - logp
        z[acc] = zp[acc]
        logp[acc] = logp_p[acc]
        if aux is not None:
            aux[acc] = aux_p[acc]
        n_acc += int(acc.sum())
        if callback is not None:
            callback(n, z, aux, acc)
    rate = n_acc / (n_iter * z.shape[0]) if n_iter else 0.0
    return z, aux, rate


# ---------------------------------------------------------------------------
# Langevin E-step
# ---------------------------------------------------------------------------


def _observation(x, noise: NoiseParams):
    return frame_power(x), noise.variance_tf()


def ld_run(
    grid: ChainGrid,
    x,
    vae: VaeParams,
    noise: NoiseParams,
    K: int,
    eta: float,
    lam: float,
    rng,
    tv_sign: float = -1.0,
    callback: Optional[Callable] = None,
) -> ChainGrid:
    """Run K Langevin iterations on every cell of ``grid``.

    The TV-regularized score is evaluated on a snapshot of the grid, so all
    cells move simultaneously.
    """
    power, nv = _observation(x, noise)

    def grad(z):
        g = batch_score(z, power, vae, nv)
        if lam != 0:
            g = g + (tv_sign * lam) * tv_subgradient(z)
        return g

    return ChainGrid(langevin(grid.samples, grad, K, eta, rng, callback))


def resample_grid(center: np.ndarray, m: int, sigma: float, rng) -> ChainGrid:
    """Draw m perturbed copies ``center + sigma * eps`` of a ``(T, L)`` latent sequence."""
    rng = _as_rng(rng)
    return ChainGrid(center[None] + sigma * rng.normal((m,) + center.shape))


def _mean_g(speech_var, power, nv, z):
    v = speech_var + nv
    g = -np.sum(np.log(v) + power / v, axis=-1) - power.shape[-1] * np.log(np.pi)
    g = g - 0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * np.log(2 * np.pi)
    return float(np.mean(g))


def _init(x: ComplexSpectrogram, vae: VaeParams, cfg: EmConfig):
    z0 = encode(vae, x.power.T)[0]
    noise = init_noise(x, cfg.nmf_rank, cfg.seed)
    return z0, noise


def ldem(x: ComplexSpectrogram, vae: VaeParams, cfg: EmConfig, sink=None):
    """Langevin-dynamics EM.  Returns ``(noise_params, EStepResult)``."""
    z, noise = _init(x, vae, cfg)
    rng = RngStream(cfg.seed, (1,))
    power = np.ascontiguousarray(x.power.T)
    sigma = np.sqrt(cfg.sigma2)
    diagnostics = []
    grid = ChainGrid(z[None])
    for j in range(1, cfg.J + 1):
        start = resample_grid(z, cfg.m, sigma, rng)
        grid = ld_run(start, x, vae, noise, cfg.K, cfg.eta, cfg.lam, rng, cfg.tv_sign)
        speech_var = decode_forward(vae, grid.samples)[0]
        record = {
            "iteration": j,
            "mean_g": _mean_g(speech_var, power, noise.variance_tf(), grid.samples),
            "step_norm": float(
                np.mean(np.linalg.norm(grid.samples - start.samples, axis=-1))
            ),
            "acceptance_rate": None,
            "tv": tv_value(grid) / grid.m,
        }
        noise = m_step(noise, power.T, speech_var)
        z = grid.mean()
        diagnostics.append(record)
        _emit(cfg, record, sink)
    return noise, EStepResult(grid, diagnostics)


def peem(x: ComplexSpectrogram, vae: VaeParams, cfg: EmConfig, sink=None):
    """Point-estimate EM: K Adam ascent steps on g per EM iteration.

    The Adam moments persist across EM iterations.
    """
    z, noise = _init(x, vae, cfg)
    power = np.ascontiguousarray(x.power.T)
    state = AdamState(lr=cfg.peem_lr)
    diagnostics = []
    for j in range(1, cfg.J + 1):
        nv = noise.variance_tf()
        z_prev = z
        z, state = adam_ascent(
            z, lambda zz: batch_score(zz, power, vae, nv), cfg.K, cfg.peem_lr, state
        )
        speech_var = decode_forward(vae, z)[0]
        record = {
            "iteration": j,
            "mean_g": _mean_g(speech_var, power, nv, z),
            "step_norm": float(np.mean(np.linalg.norm(z - z_prev, axis=-1))),
            "acceptance_rate": None,
            "tv": tv_value(z[None]),
        }
        noise = m_step(noise, power.T, speech_var[None])
        diagnostics.append(record)
        _emit(cfg, record, sink)
    return noise, EStepResult(ChainGrid(z[None]), diagnostics)


def mcem(x: ComplexSpectrogram, vae: VaeParams, cfg: EmConfig, sink=None):
    """Monte-Carlo EM with a per-frame Gaussian random-walk MH chain.

    Each EM iteration continues the chain from its last state, runs
    ``cfg.mh_iters`` steps and keeps the states after ``cfg.mh_burn``.
    """
    z, noise = _init(x, vae, cfg)
    rng = RngStream(cfg.seed, (3,))
    power = np.ascontiguousarray(x.power.T)
    diagnostics = []
    kept_z = None
    for j in range(1, cfg.J + 1):
        nv = noise.variance_tf()

        def target(zz):
            s2 = decode_forward(vae, zz)[0]
            v = s2 + nv
            g = -np.sum(np.log(v) + power / v, axis=-1) - 0.5 * np.sum(zz * zz, axis=-1)
            return g, s2

        kept_z, kept_s2 = [], []

        def keep(n, zz, s2, acc):
            if n >= cfg.mh_burn:
                kept_z.append(zz.copy())
                kept_s2.append(s2.copy())

        z_prev = z
        z, _, rate = metropolis_hastings(z, target, cfg.mh_iters, cfg.mh_var, rng, keep)
        if rate == 0.0:
            warnings.warn(f"MCEM iteration {j}: no MH proposal accepted", RuntimeWarning)
        kept_z = np.stack(kept_z)
        speech_var = np.stack(kept_s2)
        record = {
            "iteration": j,
            "mean_g": _mean_g(speech_var, power, nv, kept_z),
            "step_norm": float(np.mean(np.linalg.norm(z - z_prev, axis=-1))),
            "acceptance_rate": rate,
            "tv": tv_value(kept_z) / kept_z.shape[0],
        }
        noise = m_step(noise, power.T, speech_var)
        diagnostics.append(record)
        _emit(cfg, record, sink)
    return noise, EStepResult(ChainGrid(kept_z), diagnostics)


SOLVERS = {"ldem": ldem, "peem": peem, "mcem": mcem}


def run_solver(method: str, x, vae, cfg: EmConfig, sink=None):
    try:
        solver = SOLVERS[method]
    except KeyError:
        raise ValueError(
            f"unknown method {method!r}; choose one of {{{', '.join(METHODS)}}}"
        ) from None
    return solver(x, vae, cfg, sink)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    """A solver name plus EmConfig overrides, e.g. ``ldem`` with ``m=5``."""

    name: str
    overrides: tuple = ()

    @property
    def label(self) -> str:
        if not self.overrides:
            return self.name
        opts = ",".join(f"{'lambda' if k == 'lam' else k}={v:g}" for k, v in self.overrides)
        return f"{self.name}({opts})"

    def config(self, base: EmConfig) -> EmConfig:
        return replace(base, **dict(self.overrides))

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        """Parse ``name`` or ``name:key=value,...`` (keys: m, lambda, K, J, ...)."""
        name, _, opts = text.strip().partition(":")
        name = name.strip().lower()
        if name not in METHODS:
            raise ValueError(
                f"unknown method {name!r}; choose one of {{{', '.join(METHODS)}}}"
            )
        overrides = []
        for item in filter(None, (o.strip() for o in opts.split(","))):
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"malformed method option {item!r}")
            key = "lam" if key.strip() == "lambda" else key.strip()
            if key not in EmConfig.__dataclass_fields__:
                raise ValueError(f"unknown method option {key!r}")
            typ = type(getattr(EmConfig(), key))
            overrides.append((key, typ(float(value)) if typ is int else typ(value)))
        return cls(name, tuple(overrides))


DEFAULT_BENCH = (
    MethodSpec("peem"),
    MethodSpec("ldem", (("m", 1),)),
    MethodSpec("ldem", (("m", 5),)),
    MethodSpec("mcem"),
)


def bench(x: ComplexSpectrogram, vae, cfg: EmConfig, methods, clean=None, out_len=None):
    """Run each method on the same input and seed; time it and score it.

    ``clean`` (a Waveform) enables SI-SDR/STOI columns; without it they are
    ``None``.
    """
    from .audio import istft
    from .enhance import posterior_mean, si_sdr, stoi

    if not methods:
        raise ValueError("no methods to benchmark")
    rows = []
    for spec in methods:
        spec = spec if isinstance(spec, MethodSpec) else MethodSpec.parse(spec)
        run_cfg = spec.config(cfg)
        t0 = time.perf_counter()
        noise, result = run_solver(spec.name, x, vae, run_cfg)
        s_hat = posterior_mean(x, result.grid, vae, noise)
        elapsed = time.perf_counter() - t0
        row = {
            "method": spec.label,
            "frames": x.n_frames,
            "wall_time_s": elapsed,
            "si_sdr": None,
            "stoi": None,
            "tv": result.final_tv,
        }
        if clean is not None:
            est = istft(s_hat, out_len or len(clean), clean.sample_rate)
            row["si_sdr"] = si_sdr(clean, est)
            row["stoi"] = stoi(clean, est)
        rows.append(row)
    return rows
