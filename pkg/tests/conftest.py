import numpy as np
import pytest

from corl.policy import PolicyConfig
from corl.world import World, WorldConfig


@pytest.fixture(scope="session")
def world():
    return World(WorldConfig())


@pytest.fixture(scope="session")
def small_policy():
    return PolicyConfig(hidden=12, embed=8, max_text_len=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line, print it, then assert it."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def check(n: int, ok: bool, detail: str):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
        results[n] = line
        with request.config.pluginmanager.get_plugin("capturemanager").global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
