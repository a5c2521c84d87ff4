import numpy as np
import pytest

from mixtraffic.core import IntersectionSpec, Kind, Movement, Phase
from mixtraffic.microsim import SimParams, SimState


@pytest.fixture
def spec():
    return IntersectionSpec()


@pytest.fixture
def state(spec):
    return SimState(spec, SimParams())


def place(state, movement, d, speed=0.0, kind=Kind.RV, lane=None, phase=None):
    """Add a vehicle at distance ``d`` before the entrance (negative d: inside the box)."""
    m = Movement.parse(movement) if isinstance(movement, str) else movement
    if lane is None:
        lane = state.spec.lanes_for(m)[0]
    v = state.add_vehicle(kind, m, lane, pos=state.spec.entrance_line - d, speed=speed)
    if phase is not None:
        v.advance_phase(phase)
    elif d < 0:
        v.advance_phase(Phase.INSIDE_BOX)
    return v


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary: one line per criterion ---------------------------------------

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{outcome}  {name}  {detail}".rstrip())
