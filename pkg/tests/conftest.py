import numpy as np
import pytest

from rns.corpus import Interaction, build_corpus
from rns.model import ModelConfig
from rns.synthetic import generate_synthetic

TINY = dict(d=4, K=2, n=4, filter_heights=(1, 3), L=3, doc_len=12)


def interactions_for(user, items, t0=1000, text="good item"):
    return [Interaction(user, it, t0 + k, f"{text} {it}") for k, it in enumerate(items)]


@pytest.fixture(scope="session")
def small_corpus():
    """20 users x 14 items each over a 200 item catalog, short documents."""
    raw = generate_synthetic(20, 200, 1, 0.9, seed=3, seq_len=14)
    return build_corpus(raw, doc_len=12, min_count=1)


@pytest.fixture(scope="session")
def tiny_config(small_corpus):
    return ModelConfig(vocab_size=len(small_corpus.vocab), **TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def gradcheck_corpus():
    """4 users x 10 purchases over 30 items; train reviews use exactly 18 words,
    so the vocabulary (with PAD and OOV) has 20 entries."""
    words = [f"w{k}" for k in range(18)]
    rng = np.random.default_rng(5)
    rows = []
    for u in range(4):
        items = rng.choice(30, size=10, replace=False)
        for t, it in enumerate(items):
            text = " ".join(rng.choice(words, size=4))
            rows.append(Interaction(f"u{u}", f"i{it:02d}", 100 * u + t, text))
    # make sure every word shows up in some train-period review
    rows[0] = Interaction(rows[0].user_id, rows[0].item_id, rows[0].timestamp, " ".join(words))
    corpus = build_corpus(rows, doc_len=12, min_count=1)
    assert len(corpus.vocab) == 20
    return corpus


_verdicts = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record a one-line pass/fail result; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_verdicts, [])

    def record(name: str, ok: bool, detail: str) -> bool:
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_verdicts, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
