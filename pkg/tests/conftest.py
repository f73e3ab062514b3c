import numpy as np
import pytest

from metro_str.model_core import Scenario, delay_rate_from_demand

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = []

LINE9_RUNS = np.array([150, 120, 105, 135, 90, 120, 100, 110, 95, 120, 105, 130.0])
LINE9_BETA = np.array([0, 0.02, 0.03, 0.05, 0.05, 0.08, 0.1, 0.15, 0.3, 0.4, 0.5, 0.6, 1.0])
LINE9_ALPHA = np.array([1.2, 1.0, 0.9, 0.6, 0.4, 0.3, 0.3, 0.2, 0.2, 0.2, 0.1, 0.1, 0.0])


def line9_like(alpha_scale=0.3, disturbances=None, **changes):
    """13 stations x 40 trains with the case-study constants and train-invariant demand."""
    m, n = 40, 13
    alpha = np.tile(LINE9_ALPHA * alpha_scale, (m, 1))
    s = Scenario(
        n_stations=n, n_trains=m, nominal_run=LINE9_RUNS, min_dwell=30.0,
        scheduled_headway=360.0, min_headway=180.0,
        arrival_rate=alpha, alight_fraction=np.tile(LINE9_BETA, (m, 1)),
        delay_rate=delay_rate_from_demand(alpha), train_capacity=1860.0, platform_capacity=1860.0,
        disturbances=disturbances or {}, name="line9_like",
    )
    return s.with_changes(**changes) if changes else s


def tiny_scenario(n=3, m=3, alpha=0.0, beta_mid=0.0, lam=0.0, **kw):
    alpha_arr = np.full((m, n), float(alpha))
    alpha_arr[:, -1] = 0.0
    beta = np.full((m, n), float(beta_mid))
    beta[:, -1] = 1.0
    args = dict(
        n_stations=n, n_trains=m, nominal_run=np.full(n - 1, 120.0), min_dwell=30.0,
        scheduled_headway=360.0, min_headway=180.0, arrival_rate=alpha_arr, alight_fraction=beta,
        delay_rate=np.full((m, n), float(lam)), train_capacity=1860.0, platform_capacity=1860.0,
    )
    args.update(kw)
    return Scenario(**args)


@pytest.fixture
def line9():
    return line9_like()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
