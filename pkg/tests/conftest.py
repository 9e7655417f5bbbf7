import numpy as np
import pytest

from transmix.betacore import compute_site_scales
from transmix.emcluster import SiteStats
from transmix.simlab.scenarios import ScenarioSpec, generate_dataset


def small_instance(n_sites=(4, 4), n_triads=3, seed=0, coefficients=None, mean_range=(0.15, 0.85),
                   spread=0.7):
    """Tiny generated dataset with its scales and sufficient statistics."""
    rng = np.random.default_rng(seed)
    if coefficients is None:
        coefficients = rng.normal(0.0, spread, size=(len(n_sites), 3))
    spec = ScenarioSpec("custom", n_triads, tuple(zip(map(tuple, coefficients), n_sites)),
                        seed=seed, mean_range=mean_range)
    data, truth = generate_dataset(spec)
    scales = compute_site_scales(data)
    return data, scales, SiteStats.build(data, scales), truth


@pytest.fixture
def tiny():
    return small_instance()


@pytest.fixture(scope="session")
def s0_replicate():
    from transmix.simlab import builtin_scenario
    data, truth = generate_dataset(builtin_scenario("S0", seed=20260101))
    scales = compute_site_scales(data)
    return data, scales, SiteStats.build(data, scales), truth


#: one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
