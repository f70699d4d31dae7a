import time

import pytest

from flowmpc import mpc
from flowmpc.flowfield import DoubleGyre
from flowmpc.mpc import MpcConfig, run_mpc

# every closed-loop trajectory produced in the session, for the feasibility sweep
PRODUCED = []
ACCEPTANCE = {}

_RUNS = {}
_build = mpc._trajectory


def _recording_trajectory(*args):
    traj = _build(*args)
    PRODUCED.append(traj)
    return traj


# run_mpc looks this up at call time, so runs made anywhere in the suite are seen
mpc._trajectory = _recording_trajectory


def gyre_run(R, T_H=4.0, duration=60.0, warm_start=True):
    """Closed-loop run from (2, 1) in the default double gyre; cached per session."""
    key = (float(R), float(T_H), float(duration), warm_start)
    if key not in _RUNS:
        t = time.perf_counter()
        traj = run_mpc(DoubleGyre(), (2.0, 1.0), 0.0, MpcConfig(T_H=T_H, R=float(R)), duration,
                       warm_start=warm_start)
        _RUNS[key] = (traj, time.perf_counter() - t)
    return _RUNS[key]


@pytest.fixture(scope="session")
def run_rq2():
    return gyre_run(2.0)[0]


@pytest.fixture(scope="session")
def run_rq100():
    return gyre_run(100.0)[0]


def pytest_collection_modifyitems(items):
    # acceptance runs after the unit suites; its feasibility check must see every run
    def last(item):
        name = item.nodeid
        return ("test_acceptance.py" in name, "feasibility" in name)
    items.sort(key=last)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
