import numpy as np
import pytest

from mixtraffic.baselines import HlOnlyConfig, SignalPhase, SignalPlan, hl_only_act, stop_at_line_accel, tl_control
from mixtraffic.core import MOVEMENTS, Kind, Movement
from mixtraffic.env import Episode, Scenario
from mixtraffic.microsim import LaneChange, RvCommand, SimParams, step
from mixtraffic.policy import Decision
from tests.conftest import place


def test_default_plan_cycle_and_phases():
    plan = SignalPlan.default(30.0, 3.0)
    assert plan.cycle == pytest.approx(132.0)
    assert plan.phase_at(0.0) == (0, True)
    assert plan.phase_at(29.9) == (0, True)
    assert plan.phase_at(31.0) == (0, False)
    assert plan.phase_at(33.0) == (1, True)
    assert plan.phase_at(132.0 + 34.0) == (1, True)
    assert plan.allowed_at(31.0) == frozenset()
    assert plan.allowed_at(0.0) == {Movement.SC, Movement.NC}


def test_plan_rejects_conflicting_phase():
    with pytest.raises(ValueError, match="conflicting"):
        SignalPlan((SignalPhase(frozenset(MOVEMENTS), 10.0),))


def test_plan_rejects_unserved_movement():
    with pytest.raises(ValueError, match="never serves"):
        SignalPlan((SignalPhase(frozenset({Movement.SC, Movement.NC}), 10.0),))


def test_plan_rejects_bad_timing():
    with pytest.raises(ValueError):
        SignalPlan.default(0.0, 3.0)


def test_tl_holds_red_movements(state):
    plan = SignalPlan.default()
    red = place(state, "E-C", 10, speed=0.0)
    green = place(state, "N-C", 10, speed=0.0)
    assert tl_control(state, plan) == {red.id}
    assert green.id not in tl_control(state, plan)


def test_tl_lets_committed_vehicle_through(state):
    plan = SignalPlan.default()
    fast = place(state, "E-C", 1.0, speed=13.0)
    assert tl_control(state, plan) == set()
    assert fast.id not in tl_control(state, plan)


def test_tl_red_vehicle_never_enters(state):
    plan = SignalPlan.default()
    v = place(state, "E-C", 40, speed=10.0, kind=Kind.HV)
    for _ in range(250):  # 25 s, all inside the first green for N/S
        step(state, extra_holds=tl_control(state, plan))
    assert v.pos <= state.spec.entrance_line
    assert v.speed < 0.1


def test_hl_only_go_and_stop(state):
    v = place(state, "E-C", 15, speed=8.0)
    go = hl_only_act(state, v.id, Decision.GO)
    assert go == RvCommand(state.params.a_max_rv, LaneChange.KEEP)
    stop = hl_only_act(state, v.id, Decision.STOP)
    assert stop.accel < 0 and stop.lane_change is LaneChange.KEEP
    assert stop.accel == pytest.approx(stop_at_line_accel(v, state, 4.5))


def test_hl_only_stop_halts_before_line(state):
    v = place(state, "E-C", 45, speed=12.0)
    for _ in range(200):
        cmd = hl_only_act(state, v.id, Decision.STOP)
        step(state, {v.id: cmd})
    assert v.speed < 0.1
    assert 0.0 <= state.spec.entrance_line - v.pos <= 1.0


def test_hl_only_config_checked():
    with pytest.raises(ValueError):
        HlOnlyConfig(stop_decel=20.0).check(SimParams())


def test_hl_only_rejects_hv(state):
    hv = place(state, "E-C", 20, kind=Kind.HV)
    with pytest.raises(ValueError):
        hl_only_act(state, hv.id, Decision.GO)


def test_tl_episode_serves_all_movements():
    ep = Episode(Scenario(rv_penetration=0.0, horizon=300.0, seed=1), "tl").run()
    departed = {e.movement for e in ep.state.event_log if e.event_type == "depart"}
    assert departed == {m.label for m in MOVEMENTS}
    assert ep.gridlock_time is None


def test_all_go_hl_only_matches_uncontrolled_inputs():
    # a Go-everything high level never holds anyone at the line
    from mixtraffic.env import AgentConfig

    sc = Scenario(rv_penetration=1.0, horizon=60.0, seed=2)
    ep = Episode(sc, "hl_only", None, AgentConfig("go", "hold", False))
    while not ep.done:
        ep.step()
        assert not ep.agent.yielding
