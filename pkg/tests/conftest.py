import numpy as np
import pytest

from gpsm.msa import Alphabet, Msa, parse_fasta


def make_msa(rows, symbols="AB"):
    return parse_fasta("".join(f">s{k}\n{r}\n" for k, r in enumerate(rows)), Alphabet(symbols))


def random_msa(N, L, q, seed=0):
    data = np.random.default_rng(seed).integers(0, q, size=(N, L), dtype=np.uint8)
    return Msa(data, Alphabet.letters(q))


@pytest.fixture
def xor_msa():
    return make_msa(["AAA", "ABB", "BAB", "BBA"])


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
