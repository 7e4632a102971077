import numpy as np
import pytest

from unitrec.model import ModelConfig, TurnedHistory, UniTRec

TINY = ModelConfig(
    vocab_size=23, d_model=8, n_heads=2, local_layers=1, global_layers=1,
    decoder_layers=1, d_ff=16, max_len=32,
)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return UniTRec(TINY, seed=3)


def random_history(rng, n_turns, vocab, min_len=1, max_len=4):
    tokens, turn_ids = [], []
    for t in range(n_turns):
        n = int(rng.integers(min_len, max_len + 1))
        tokens += rng.integers(5, vocab, size=n).tolist()
        turn_ids += [t] * n
    return TurnedHistory(tokens, turn_ids)


def random_candidate(rng, vocab, n=None):
    n = int(rng.integers(2, 6)) if n is None else n
    return (1, *rng.integers(5, vocab, size=n).tolist(), 2)


def perturb_params(model, rng, scale=0.3):
    """Move every parameter off its init so biases and gains are non-trivial."""
    for p in model.params.values():
        p.data = p.data + rng.normal(0.0, scale, size=p.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One PASS/FAIL line per acceptance criterion, repeated in the terminal summary.
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_RESULTS[number] = (ok, detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
