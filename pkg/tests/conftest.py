import numpy as np
import pytest

from egs import numerics as nx


@pytest.fixture
def f64():
    with nx.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)




ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def gate(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert on it."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(n, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {n}: {title} ({detail})"
        lines.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda ln: int(ln.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
