import time

import pytest

from ldem.audio import CorpusSpec, stft, synth_corpus
from ldem.vae import TrainConfig, train_vae

# Desk-scale training corpus and held-out test utterances (disjoint seeds).
TRAIN_SPEC = CorpusSpec(n_utterances=200, duration_s=2.0, seed=1)
TEST_SPEC = CorpusSpec(n_utterances=20, duration_s=2.0, seed=999)
TRAIN_CFG = TrainConfig(batch_size=128, lr=1e-4, patience=20, max_epochs=200, seed=0)


@pytest.fixture(scope="session")
def trained():
    """VAE trained once per session, with its training wall time in seconds."""
    corpus = [stft(w) for w in synth_corpus(TRAIN_SPEC)]
    t0 = time.perf_counter()
    vae = train_vae(corpus, TRAIN_CFG)
    return vae, time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained_vae(trained):
    return trained[0]


@pytest.fixture(scope="session")
def test_utterances():
    return synth_corpus(TEST_SPEC)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``; returns ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n, ok, detail):
        lines[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
