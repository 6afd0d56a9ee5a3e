import numpy as np
import pytest

from ctvae.models import ModelConfig


def toy_pairs(n=32, vocab_size=20, seed=0):
    """``n`` distinct posts, each with one response, over ids 4..vocab_size-1."""
    rng = np.random.default_rng(seed)
    pairs, seen = [], set()
    while len(pairs) < n:
        post = tuple(int(t) for t in rng.integers(4, vocab_size, size=rng.integers(3, 6)))
        if post in seen:
            continue
        seen.add(post)
        resp = [int(t) for t in rng.integers(4, vocab_size, size=rng.integers(2, 5))]
        pairs.append((list(post), resp))
    return pairs


def toy_config(kind="ctvae", **overrides):
    base = dict(kind=kind, embed_dim=16, hidden_dim=32, latent_dim=8, vocab_size=20, batch_size=32, lr=1e-2,
                init_std=0.1, pretrain_steps=0, ramp_steps=200, max_len=8, seed=0)
    return ModelConfig(**{**base, **overrides})


@pytest.fixture
def pairs():
    return toy_pairs()


# filled by test_acceptance.record and echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
