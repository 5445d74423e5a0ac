"""Frame-wise VAE speech prior.

Encoder: log-power (513) -> tanh(128) -> (mu, logvar) in R^32.
Decoder: z (32) -> tanh(128) -> log-variance (513); the speech frame is a
zero-mean circular complex Gaussian with variance ``exp(log-variance)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .audio import N_FREQ, ComplexSpectrogram
from .nn import (
    AdamState,
    DenseLayer,
    DivergenceError,
    ShapeError,
    adam_step,
    dense_backward,
    dense_forward,
    dense_input_grad,
    exp_backward,
    tanh_backward,
    tanh_forward,
)

log = logging.getLogger(__name__)

LATENT_DIM = 32
HIDDEN = 128
LOG_FLOOR = 1e-10

LAYER_SHAPES = {
    "enc_hidden": (HIDDEN, N_FREQ),
    "enc_mu": (LATENT_DIM, HIDDEN),
    "enc_logvar": (LATENT_DIM, HIDDEN),
    "dec_hidden": (HIDDEN, LATENT_DIM),
    "dec_logvar_s": (N_FREQ, HIDDEN),
}


@dataclass
class VaeParams:
    enc_hidden: DenseLayer
    enc_mu: DenseLayer
    enc_logvar: DenseLayer
    dec_hidden: DenseLayer
    dec_logvar_s: DenseLayer

    def __post_init__(self):
        for name, layer in self.named_layers():
            want = LAYER_SHAPES[name]
            if layer.weight.shape != want:
                raise ShapeError(f"{name}: expected weight {want}, got {layer.weight.shape}")
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ValueError(f"{name}: non-finite parameters")

    def named_layers(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def flat(self) -> list[np.ndarray]:
        out = []
        for _, layer in self.named_layers():
            out += [layer.weight, layer.bias]
        return out

    @classmethod
    def from_flat(cls, arrays: Sequence[np.ndarray]) -> "VaeParams":
        names = [f.name for f in fields(cls)]
        return cls(
            **{
                name: DenseLayer(arrays[2 * i], arrays[2 * i + 1])
                for i, name in enumerate(names)
            }
        )

    def copy(self) -> "VaeParams":
        return VaeParams.from_flat([a.copy() for a in self.flat()])


def init_vae(seed: int = 0) -> VaeParams:
    """Uniform(+-1/sqrt(fan_in)) initialization, layer by layer in field order."""
    rng = np.random.default_rng(seed)
    return VaeParams(
        **{
            name: DenseLayer.init(shape[1], shape[0], rng)
            for name, shape in LAYER_SHAPES.items()
        }
    )


def _check_power(frame_power):
    p = np.asarray(frame_power, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite power passed to encoder")
    if np.any(p < 0):
        raise ValueError("frame power must be non-negative")
    return p


def encode(params: VaeParams, frame_power):
    """Return ``(mu, logvar)`` of q(z | s) for one frame or a batch of frames."""
    p = _check_power(frame_power)
    h = tanh_forward(dense_forward(params.enc_hidden, np.log(p + LOG_FLOOR)))
    return dense_forward(params.enc_mu, h), dense_forward(params.enc_logvar, h)


def encode_backward(params: VaeParams, frame_power, grad_mu, grad_logvar):
    """Vector-Jacobian product of :func:`encode` w.r.t. the frame power."""
    p = _check_power(frame_power)
    h = tanh_forward(dense_forward(params.enc_hidden, np.log(p + LOG_FLOOR)))
    g_h = dense_input_grad(params.enc_mu, grad_mu) + dense_input_grad(
        params.enc_logvar, grad_logvar
    )
    g_in = dense_input_grad(params.enc_hidden, tanh_backward(h, g_h))
    return g_in / (p + LOG_FLOOR)


def decode_forward(params: VaeParams, z):
    """Return ``(variance, hidden)``; ``hidden`` feeds :func:`decode_backward`."""
    h = tanh_forward(dense_forward(params.dec_hidden, z))
    out = dense_forward(params.dec_logvar_s, h)
    return np.exp(out, out=out), h


def decode(params: VaeParams, z) -> np.ndarray:
    """Speech variance sigma^2(z) > 0, shape ``(..., 513)``."""
    return decode_forward(params, z)[0]


def decode_backward_logvar(params: VaeParams, hidden, grad_logvar):
    """Back-propagate a gradient on the decoder's log-variance output to ``z``."""
    g_h = dense_input_grad(params.dec_logvar_s, grad_logvar)
    return dense_input_grad(params.dec_hidden, tanh_backward(hidden, g_h))


def decode_backward(params: VaeParams, hidden, variance, grad_variance):
    """Vector-Jacobian product of :func:`decode` w.r.t. ``z``."""
    return decode_backward_logvar(params, hidden, exp_backward(variance, grad_variance))


def kl_divergence(mu, logvar) -> np.ndarray:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)) per row."""
    return -0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar), axis=-1)


def _elbo_terms(params: VaeParams, power: np.ndarray, eps: np.ndarray):
    inp = np.log(power + LOG_FLOOR)
    h1 = tanh_forward(dense_forward(params.enc_hidden, inp))
    mu = dense_forward(params.enc_mu, h1)
    logvar = dense_forward(params.enc_logvar, h1)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    h2 = tanh_forward(dense_forward(params.dec_hidden, z))
    out = dense_forward(params.dec_logvar_s, h2)
    ratio = power * np.exp(-out)
    recon = np.sum(ratio + out, axis=-1)
    kl = kl_divergence(mu, logvar)
    return dict(inp=inp, h1=h1, mu=mu, logvar=logvar, std=std, z=z, h2=h2,
                ratio=ratio, recon=recon, kl=kl)


def _loss_from_terms(c) -> float:
    if np.any(c["kl"] < -1e-9):
        raise AssertionError("negative KL divergence")
    loss = float(np.sum(c["recon"]) + np.sum(c["kl"]))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite ELBO")
    return loss


def elbo(params: VaeParams, frame_power, rng=None, eps=None) -> float:
    """Negative ELBO summed over a batch of power frames ``(N, 513)``.

    One reparameterized sample per frame; pass ``eps`` (``(N, 32)``) to fix
    it, otherwise it is drawn from ``rng``.
    """
    power = np.atleast_2d(_check_power(frame_power))
    if power.shape[0] == 0:
        raise ValueError("empty batch")
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal((power.shape[0], LATENT_DIM))
    return _loss_from_terms(_elbo_terms(params, power, np.atleast_2d(eps)))


def elbo_grad(params: VaeParams, frame_power, eps):
    """Negative ELBO and its gradient, as a list aligned with ``params.flat()``."""
    power = np.atleast_2d(np.asarray(frame_power, dtype=np.float64))
    eps = np.atleast_2d(eps)
    c = _elbo_terms(params, power, eps)
    loss = _loss_from_terms(c)

    g_out = 1.0 - c["ratio"]
    gw_ds, gb_ds, g_h2 = dense_backward(params.dec_logvar_s, c["h2"], g_out)
    gw_dh, gb_dh, g_z = dense_backward(params.dec_hidden, c["z"], tanh_backward(c["h2"], g_h2))
    g_mu = g_z + c["mu"]
    g_lv = 0.5 * g_z * eps * c["std"] + 0.5 * (np.exp(c["logvar"]) - 1.0)
    gw_mu, gb_mu, g_h1a = dense_backward(params.enc_mu, c["h1"], g_mu)
    gw_lv, gb_lv, g_h1b = dense_backward(params.enc_logvar, c["h1"], g_lv)
    gw_eh, gb_eh, _ = dense_backward(
        params.enc_hidden, c["inp"], tanh_backward(c["h1"], g_h1a + g_h1b)
    )
    grads = [gw_eh, gb_eh, gw_mu, gb_mu, gw_lv, gb_lv, gw_dh, gb_dh, gw_ds, gb_ds]
    return loss, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-4
    patience: int = 20
    max_epochs: int = 500
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.max_epochs < 1:
            raise ValueError("batch_size, lr and max_epochs must be positive")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


def _stack_power(specs) -> np.ndarray:
    if not specs:
        return np.zeros((0, N_FREQ))
    return np.concatenate([s.power.T for s in specs], axis=0)


def split_corpus(corpus: Sequence[ComplexSpectrogram], val_fraction: float, seed: int):
    """Shuffle utterances and split them into (train, validation)."""
    order = np.random.default_rng(seed).permutation(len(corpus))
    n_val = int(round(val_fraction * len(corpus)))
    if len(corpus) >= 2:
        n_val = min(max(n_val, 1), len(corpus) - 1)
    else:
        n_val = 0
    val = [corpus[i] for i in order[:n_val]]
    train = [corpus[i] for i in order[n_val:]]
    return train, val


def train_vae(
    corpus: Sequence[ComplexSpectrogram],
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> VaeParams:
    """Fit the VAE by minibatch Adam on the negative ELBO with early stopping.

    Losses are per-frame averages.  The returned parameters are those of the
    epoch with the lowest validation loss; training stops once ``patience``
    epochs pass without improvement.  With a single utterance the training
    loss stands in for the validation loss.
    """
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    train, val = split_corpus(list(corpus), cfg.val_fraction, cfg.seed)
    x_train = _stack_power(train)
    x_val = _stack_power(val)

    rng = np.random.default_rng([cfg.seed, 1])
    val_eps = np.random.default_rng([cfg.seed, 2]).standard_normal((x_val.shape[0], LATENT_DIM))

    params = init_vae(cfg.seed)
    flat = params.flat()
    state = AdamState(lr=cfg.lr)
    best, best_loss, stale = params.copy(), np.inf, 0

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(x_train.shape[0])
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = x_train[perm[start:start + cfg.batch_size]]
            eps = rng.standard_normal((batch.shape[0], LATENT_DIM))
            try:
                loss, grads = elbo_grad(VaeParams.from_flat(flat), batch, eps)
                n = batch.shape[0]
                flat, state = adam_step(flat, [g / n for g in grads], state)
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}: {exc}") from exc
            total += loss
        train_loss = total / x_train.shape[0]
        params = VaeParams.from_flat(flat)

        if x_val.shape[0]:
            try:
                val_loss = elbo(params, x_val, eps=val_eps) / x_val.shape[0]
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}: {exc}") from exc
        else:
            val_loss = train_loss

        record = EpochRecord(epoch, train_loss, val_loss)
        log.info("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(record)

        if val_loss < best_loss:
            best, best_loss, stale = params.copy(), val_loss, 0
        else:
            stale += 1
        if stale >= cfg.patience:
            break
    return best
