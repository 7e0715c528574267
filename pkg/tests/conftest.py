import numpy as np
import pytest

from panelcf.dgp import DgpConfig, generate
from panelcf.panel import PanelDataset, build_observation_set, derive_schedule

# pass/fail lines from test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_panel(Y, D=None, X=None, levels=None, intensity=None, transform="identity", years=None):
    Y = np.asarray(Y, dtype=float)
    N, T = Y.shape
    D = np.zeros((N, T)) if D is None else np.asarray(D, dtype=float)
    X = np.zeros((N, T, 0)) if X is None else np.asarray(X, dtype=float)
    return PanelDataset(
        region_ids=[f"R{i}" for i in range(N)],
        years=list(years or range(2000, 2000 + T)),
        Y=Y,
        D=D,
        X=X,
        intensity=np.zeros((N, T)) if intensity is None else intensity,
        levels=levels,
        transform=transform,
        covariate_names=[f"x{k}" for k in range(X.shape[2])],
    )


@pytest.fixture
def small_dgp():
    data, truth = generate(DgpConfig(N=40, T=16, first_treat=8, last_treat=10, seed=11))
    schedule = derive_schedule(data)
    return data, truth, schedule, build_observation_set(data, schedule)
