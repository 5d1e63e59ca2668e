import numpy as np
import pytest

_verdicts = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.stash[_verdicts] = []


@pytest.fixture
def verdict(request, capsys):
    """Record a PASS/FAIL line for an acceptance criterion; echoed in the summary."""
    lines = request.config.stash[_verdicts]

    def record(label: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line, end="")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_verdicts, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
