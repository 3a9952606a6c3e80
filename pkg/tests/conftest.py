import numpy as np
import pytest

from rmstnma.simulation import ScenarioConfig, generate_dataset


@pytest.fixture(scope="session")
def small_nma():
    """Four three-arm trials of 300 from the Scenario 1 generator (tau = 0.1)."""
    cfg = ScenarioConfig.for_scenario("S1", n=300, nt=4, tau=0.1, replications=1, base_seed=11)
    return generate_dataset(cfg, 0)


@pytest.fixture(scope="session")
def network3():
    """Scenario 3, network N3: two-arm trials only."""
    cfg = ScenarioConfig.for_scenario("S3", network="N3", tau=0.1, replications=1, base_seed=5)
    return generate_dataset(cfg, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import oracles

    if oracles.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(oracles.ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
