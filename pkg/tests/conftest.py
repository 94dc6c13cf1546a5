import numpy as np
import pytest

from mercpt import model as lm

ACCEPTANCE_LINES: list[str] = []


def report_criterion(name: str, passed: bool, detail: str = "") -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_dims():
    return lm.ModelDims(vocab_size=11, embed_dim=4, context=2, hidden_dim=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
