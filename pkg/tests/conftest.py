import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gluenote.midi_io import NoteSequence  # noqa: E402
from gluenote.tokenizer import TokenVocabulary  # noqa: E402

REPO = Path(__file__).resolve().parents[1]
PUBLIC_CORPUS = REPO / "data" / "public_corpus"
TINY_CHECKPOINT = REPO / "checkpoints" / "tiny.pt"


def random_sequence(n, seed=0, pitch=(36, 96), max_ioi=3):
    rng = np.random.default_rng(seed)
    onset = np.cumsum(rng.integers(0, max_ioi + 1, n) * 120)
    onset -= onset[0] if n else 0
    seq = NoteSequence(onset, rng.integers(pitch[0], pitch[1] + 1, n), rng.integers(30, 960, n),
                       rng.integers(20, 110, n))
    return seq.sorted()


@pytest.fixture(scope="session")
def vocab():
    return TokenVocabulary.default()


@pytest.fixture
def seq600():
    return random_sequence(600, seed=7)


# acceptance criteria append (number, status, detail) here; printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number:>2}: {status:<4} {detail}")
