"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are also
collected in the "acceptance criteria" section of the terminal summary.
"""

import csv
import io
import time

import numpy as np
import pytest

from conftest import TEST_SPEC, TRAIN_SPEC
from ldem import cli
from ldem.audio import CorpusSpec, Waveform, interior_slice, istft, mix_at_snr, stft, synth_corpus, white_noise
from ldem.enhance import enhance_file, si_sdr
from ldem.nn import (
    DenseLayer,
    dense_backward,
    dense_forward,
    exp_backward,
    exp_forward,
    tanh_backward,
    tanh_forward,
)
from ldem.noise import NoiseParams, m_step, m_step_cost
from ldem.posterior import ChainGrid, EmConfig, batch_log_joint, frame_power, score
from ldem.samplers import DEFAULT_BENCH, RngStream, bench, ld_run, metropolis_hastings
from ldem.vae import init_vae

pytestmark = pytest.mark.slow

F, L = 513, 32


def rel_err(a, b):
    return np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(np.ravel(b)), 1e-300)


# ---------------------------------------------------------------------------
# 1. Gradient correctness
# ---------------------------------------------------------------------------


def _nn_case(rng):
    """exp(tanh(dense(x))) contracted with random weights; returns worst error."""
    n_in, n_out, batch = (int(v) for v in rng.integers(1, 7, 3))
    layer = DenseLayer(rng.standard_normal((n_out, n_in)), rng.standard_normal(n_out))
    x = rng.standard_normal((batch, n_in))
    c = rng.standard_normal((batch, n_out))

    def f(W, b, xx):
        return float(np.sum(c * exp_forward(tanh_forward(dense_forward(DenseLayer(W, b), xx)))))

    h1 = tanh_forward(dense_forward(layer, x))
    e = exp_forward(h1)
    g_pre = tanh_backward(h1, exp_backward(e, c))
    gW, gb, gx = dense_backward(layer, x, g_pre)

    h = 1e-6
    worst = 0.0
    for analytic, arr, slot in ((gW, layer.weight, 0), (gb, layer.bias, 1), (gx, x, 2)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            args_p = [layer.weight.copy(), layer.bias.copy(), x.copy()]
            args_m = [layer.weight.copy(), layer.bias.copy(), x.copy()]
            args_p[slot][idx] += h
            args_m[slot][idx] -= h
            num[idx] = (f(*args_p) - f(*args_m)) / (2 * h)
        worst = max(worst, rel_err(analytic, num))
    return worst


def _score_case(rng):
    vae = init_vae(int(rng.integers(0, 50)))
    scale = 10.0 ** rng.uniform(-2, 1)
    noise = NoiseParams(rng.uniform(0.05, 1, (F, 4)) * scale, rng.uniform(0.05, 1, (4, 1)))
    x = (rng.standard_normal(F) + 1j * rng.standard_normal(F)) * np.sqrt(scale)
    z = rng.standard_normal(L) * rng.uniform(0.3, 2.0)
    h = 1e-5
    probes = np.concatenate([z + h * np.eye(L), z - h * np.eye(L)])
    g = batch_log_joint(probes, np.abs(x) ** 2, vae, noise.variance_tf()[0])
    num = (g[:L] - g[L:]) / (2 * h)
    return rel_err(score(z, x, vae, noise, 0), num)


def test_criterion_1_gradients(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    n_cases = 500
    score_worst = max(_score_case(rng) for _ in range(n_cases))
    nn_worst = max(_nn_case(rng) for _ in range(n_cases))
    elapsed = time.perf_counter() - t0
    ok = score_worst < 1e-5 and nn_worst < 1e-5 and elapsed < 60
    criterion(1, ok, f"score max rel err {score_worst:.2e}, nn max rel err {nn_worst:.2e} "
                     f"over {n_cases}+{n_cases} configurations in {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 2. STFT fidelity
# ---------------------------------------------------------------------------


def test_criterion_2_stft(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2048, 48000))
        x = rng.standard_normal(n) * 10.0 ** rng.uniform(-3, 1)
        y = istft(stft(Waveform(x)), n).samples
        sl = interior_slice(n)
        worst = max(worst, rel_err(y[sl], x[sl]))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10
    criterion(2, ok, f"max interior rel err {worst:.2e} over 100 signals in {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 3. Sampler correctness on the standard-Gaussian target
# ---------------------------------------------------------------------------


def _frozen_target_problem(T):
    vae = init_vae(0)
    vae.dec_hidden = DenseLayer(np.zeros((128, L)), np.zeros(128))
    vae.dec_logvar_s = DenseLayer(np.zeros((F, 128)), np.zeros(F))
    x = np.ones((F, T), complex)
    noise = NoiseParams(np.ones((F, 1)), np.ones((1, T)))
    return vae, x, noise


class _BatchMeans:
    """Per-dimension mean/variance with batch-means standard errors.

    Frames are independent chains, so every (frame, batch) pair is one batch.
    """

    def __init__(self, T, n_batches, batch_len):
        self.sums = np.zeros((n_batches, T, L))
        self.sq = np.zeros(L)
        self.batch_len = batch_len
        self.count = 0

    def add(self, z):
        self.sums[self.count // self.batch_len] += z
        self.sq += (z * z).sum(axis=0)
        self.count += 1

    def summary(self):
        means = self.sums / self.batch_len  # (B, T, L)
        pooled = means.reshape(-1, L)
        mean = pooled.mean(axis=0)
        se = pooled.std(axis=0, ddof=1) / np.sqrt(pooled.shape[0])
        var = self.sq / (self.count * self.sums.shape[1]) - mean**2
        return mean, se, var


def test_criterion_3_samplers(criterion):
    t0 = time.perf_counter()
    T, n_kept, n_batches = 8, 100_000, 50
    vae, x, noise = _frozen_target_problem(T)

    # Langevin: eta = 0.005, every step kept.
    rng = RngStream(3, (1,))
    acc = _BatchMeans(T, n_batches, n_kept // n_batches)
    start = ChainGrid(rng.normal((1, T, L)))
    ld_run(start, x, vae, noise, n_kept, 0.005, 0.0, rng, callback=lambda k, z: acc.add(z[0]))
    ld_mean, ld_se, ld_var = acc.summary()

    # MCEM's MH schedule: 40 steps per EM iteration, 30 burn-in, 10 kept,
    # warm-started, proposal variance 0.01, target g from the pipeline.
    cfg = EmConfig()
    power, nv = frame_power(x), noise.variance_tf()
    rng = RngStream(3, (2,))
    mh = _BatchMeans(T, n_batches, n_kept // n_batches)
    z = rng.normal((T, L))
    rates = []

    def target(zz):
        return batch_log_joint(zz, power, vae, nv), None

    def keep(n, zz, aux, accepted):
        if n >= cfg.mh_burn:
            mh.add(zz)

    for _ in range(n_kept // cfg.mh_keep):
        z, _, rate = metropolis_hastings(z, target, cfg.mh_iters, cfg.mh_var, rng, keep)
        rates.append(rate)
    mh_mean, mh_se, mh_var = mh.summary()
    elapsed = time.perf_counter() - t0

    def band_ok(mean, se, var):
        return bool(np.all(np.abs(mean) <= 3 * se) and np.all((var >= 0.9) & (var <= 1.1)))

    ld_ok, mh_ok = band_ok(ld_mean, ld_se, ld_var), band_ok(mh_mean, mh_se, mh_var)
    ok = ld_ok and mh_ok and elapsed < 120
    criterion(3, ok, (
        f"LD max|mean|/SE {np.max(np.abs(ld_mean) / ld_se):.2f}, var [{ld_var.min():.3f}, {ld_var.max():.3f}]; "
        f"MH max|mean|/SE {np.max(np.abs(mh_mean) / mh_se):.2f}, var [{mh_var.min():.3f}, {mh_var.max():.3f}], "
        f"acceptance {np.mean(rates):.2f}; {elapsed:.1f} s"))
    assert ok


# ---------------------------------------------------------------------------
# 4. NMF monotonicity
# ---------------------------------------------------------------------------


def test_criterion_4_nmf_monotone(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = -np.inf
    n_updates = 0
    for _ in range(1000):
        Fd, r, T, m = (int(v) for v in rng.integers(1, [40, 9, 30, 6]))
        scale = 10.0 ** rng.uniform(-3, 3)
        noise = NoiseParams(rng.uniform(0.01, 1, (Fd, r)) * scale, rng.uniform(0.01, 1, (r, T)))
        power = rng.exponential(scale, (Fd, T))
        speech = rng.exponential(scale, (m, T, Fd)) + 1e-9
        cost = m_step_cost(noise, power, speech)
        for _ in range(5):
            noise = m_step(noise, power, speech)
            new = m_step_cost(noise, power, speech)
            worst = max(worst, new - cost)
            cost = new
            n_updates += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 60
    criterion(4, ok, f"max cost change {worst:.2e} (tol +1e-9) over {n_updates} sweeps "
                     f"(1000 instances) in {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 5-7. End-to-end enhancement on held-out synthetic utterances at 0 dB
# ---------------------------------------------------------------------------

E2E_METHODS = {
    "ldem": ("ldem", EmConfig()),
    "peem": ("peem", EmConfig()),
    "ldem_tv": ("ldem", EmConfig(lam=5.0, m=5)),
}


@pytest.fixture(scope="module")
def e2e(trained_vae, test_utterances):
    out = {k: {"in": [], "out": [], "tv": []} for k in E2E_METHODS}
    for i, clean in enumerate(test_utterances):
        noisy = mix_at_snr(clean, white_noise(len(clean), np.random.default_rng([TEST_SPEC.seed, i])), 0.0)
        base = si_sdr(clean, noisy)
        for key, (method, cfg) in E2E_METHODS.items():
            res = enhance_file(noisy, trained_vae, cfg, method)
            out[key]["in"].append(base)
            out[key]["out"].append(si_sdr(clean, res.enhanced))
            out[key]["tv"].append(res.final_tv)
    return {k: {s: np.array(v) for s, v in d.items()} for k, d in out.items()}


def test_criterion_5_enhancement(criterion, trained, e2e):
    _, train_seconds = trained
    r = e2e["ldem"]
    gain = float(np.mean(r["out"] - r["in"]))
    ok = gain >= 2.0 and train_seconds <= 900 and TRAIN_SPEC.n_utterances >= 200
    criterion(5, ok, f"LDEM(lambda=0, m=1) mean SI-SDR gain {gain:+.2f} dB over {len(r['in'])} "
                     f"utterances (input {np.mean(r['in']):.2f} dB); VAE trained on "
                     f"{TRAIN_SPEC.n_utterances} utterances in {train_seconds:.0f} s")
    assert ok


def test_criterion_6_ldem_vs_peem(criterion, e2e):
    ld, pe = float(np.mean(e2e["ldem"]["out"])), float(np.mean(e2e["peem"]["out"]))
    ok = ld >= pe
    criterion(6, ok, f"mean SI-SDR LDEM {ld:.2f} dB vs PEEM {pe:.2f} dB")
    assert ok


def test_criterion_7_regularization(criterion, e2e):
    base, reg = e2e["ldem"], e2e["ldem_tv"]
    sdr_b, sdr_r = float(np.mean(base["out"])), float(np.mean(reg["out"]))
    tv_b, tv_r = float(np.mean(base["tv"])), float(np.mean(reg["tv"]))
    ok = sdr_r >= sdr_b - 1.0 and tv_r < tv_b
    criterion(7, ok, f"LDEM(lambda=5, m=5) {sdr_r:.2f} dB vs LDEM(lambda=0, m=1) {sdr_b:.2f} dB; "
                     f"mean final TV {tv_r:.1f} vs {tv_b:.1f}")
    assert ok


# ---------------------------------------------------------------------------
# 8. Runtime ordering
# ---------------------------------------------------------------------------


def test_criterion_8_runtime(criterion, trained_vae):
    clean = synth_corpus(CorpusSpec(1, 5.0, seed=TEST_SPEC.seed + 1))[0]
    noisy = mix_at_snr(clean, white_noise(len(clean), np.random.default_rng(8)), 0.0)
    rows = bench(stft(noisy), trained_vae, EmConfig(), DEFAULT_BENCH, clean=clean)
    t = {r["method"]: r["wall_time_s"] for r in rows}
    pe, l1, l5, mc = t["peem"], t["ldem(m=1)"], t["ldem(m=5)"], t["mcem"]
    checks = {
        "LDEM(m=1) < LDEM(m=5)": l1 < l5,
        "LDEM(m=5) < MCEM": l5 < mc,
        "LDEM(m=1) <= 1.5 PEEM": l1 <= 1.5 * pe,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    criterion(8, ok, f"{rows[0]['frames']} frames; PEEM {pe:.1f} s, LDEM(m=1) {l1:.1f} s, "
                     f"LDEM(m=5) {l5:.1f} s, MCEM {mc:.1f} s"
                     + (f"; violated: {', '.join(failed)}" if failed else ""))
    assert ok


# ---------------------------------------------------------------------------
# 9. Determinism of cmd_eval
# ---------------------------------------------------------------------------


def test_criterion_9_determinism(criterion, trained_vae, tmp_path):
    ckpt = tmp_path / "vae.ckpt"
    cli.save_checkpoint(ckpt, trained_vae)
    cfg = tmp_path / "eval.cfg"
    cfg.write_text(
        "J = 10\neval_utterances = 2\nduration_s = 2.0\nsnr_list = -5 0 5\n"
        "noise_type = colored\nseed = 21\n"
        "methods = peem ldem ldem:m=5,lambda=5 mcem\n"
    )
    reports = []
    for k in range(2):
        out = tmp_path / f"r{k}.csv"
        assert cli.main(["eval", str(ckpt), "--config", str(cfg), "--out", str(out)],
                        out=io.StringIO()) == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        col = rows[0].index("wall_time_s")
        reports.append([r[:col] + r[col + 1:] for r in rows])
    same = reports[0] == reports[1]
    n_rows = len(reports[0]) - 1
    ok = same and n_rows == 2 * 3 * 5
    criterion(9, ok, f"two cmd_eval runs, {n_rows} rows each, "
                     f"{'identical' if same else 'DIFFERENT'} excluding wall_time_s")
    assert ok
