import numpy as np
import pytest

from tpemimo.scenario import ScenarioConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return ScenarioConfig(L=3, K=8, M=24, G=2, n_drops=1, n_trials=40)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one ``ACCEPTANCE n: PASS/FAIL`` line and return the verdict."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
