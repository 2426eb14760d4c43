import numpy as np
import pytest

from mbpg.env import TabularMdpSpec
from mbpg.policy import TabularSoftmax

# frozen draw: 2 states, 2 actions, dense transitions, rewards in [-1, 1]
ORACLE_P = np.array([
    [[0.173641, 0.826359], [0.407559, 0.592441]],
    [[0.313802, 0.686198], [0.730261, 0.269739]],
])
ORACLE_R = np.array([[0.360039, -0.926246], [-0.473715, 0.104877]])


def oracle_mdp(horizon=3, gamma=0.9, reward=ORACLE_R):
    return TabularMdpSpec(
        transition=ORACLE_P, reward=reward, initial_dist=[0.6, 0.4], horizon=horizon, discount=gamma
    )


@pytest.fixture
def mdp():
    return oracle_mdp()


@pytest.fixture
def tab_policy():
    return TabularSoftmax(2, 2)


def random_thetas(n, dim=4, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return [scale * rng.standard_normal(dim) for _ in range(n)]


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[marker.args[0]] = (marker.args[1], report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[num]
        line = f"[{num:2d}] {'PASS' if ok else 'FAIL'}  {name}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
