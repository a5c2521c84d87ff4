import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixtraffic.core import MOVEMENTS, IntersectionSpec, Kind, Movement, Phase
from mixtraffic.microsim import Event, SimState, step
from mixtraffic.observe import (
    ObservationBuilder,
    average_queue,
    avg_waiting_time,
    final_waits,
    high_level_obs,
    low_level_obs,
    movement_stats,
    neighbour_lane_flags,
    obs_sizes,
    step_reward,
    unregulated_ratio,
)
from tests.conftest import place

IDX = {m: k for k, m in enumerate(MOVEMENTS)}


def _waiting(state, movement, d, steps, **kw):
    v = place(state, movement, d, **kw)
    v.wait_steps = steps
    return v


def test_sizes():
    assert obs_sizes(10) == (97, 99)
    assert obs_sizes(4) == (16 + 32 + 1, 16 + 32 + 3)


def test_empty_zone_all_zero_except_distance(state):
    rv = place(state, "E-C", 40, speed=5.0)
    obs = high_level_obs(state, rv.id)
    assert obs.shape == (97,)
    assert np.all(obs[:16] == 0.0)
    # the ego RV itself shows up in its own occupancy map
    occ = obs[16:96].reshape(8, 10)
    assert occ[IDX[Movement.EC]].sum() > 0
    assert np.all(np.delete(occ, IDX[Movement.EC], axis=0) == 0)
    assert obs[96] == pytest.approx(40 / 50)


def test_queue_and_wait_features(state):
    # three stopped E-C vehicles, waits 10 s, 20 s, 30 s; capacity 50 m / 5 m on one lane
    for d, w in ((1, 100), (7, 200), (13, 300)):
        _waiting(state, "E-C", d, w, kind=Kind.HV)
    rv = place(state, "N-L", 30, speed=4.0)
    obs = high_level_obs(state, rv.id)
    k = IDX[Movement.EC]
    assert obs[2 * k] == pytest.approx(3 / 10)
    assert obs[2 * k + 1] == pytest.approx(20.0 / 120.0)
    # moving RV: occupies cells but is not queued
    j = IDX[Movement.NL]
    assert obs[2 * j] == 0.0 and obs[2 * j + 1] == 0.0


def test_features_clamped(state):
    _waiting(state, "W-C", 2, 5000, kind=Kind.HV)  # 500 s > w_max
    rv = place(state, "E-C", 20, speed=3.0)
    obs = high_level_obs(state, rv.id)
    assert obs[2 * IDX[Movement.WC] + 1] == 1.0
    assert np.all((obs >= 0) & (obs <= 1))


def test_occupancy_cells_hand_computed(state):
    # front at d = 12 (pos 188), rear at 183: cells 6 and 7 of [150, 200) in 5 m steps
    place(state, "S-C", 12, speed=2.0, kind=Kind.HV)
    stats = movement_stats(state, Movement.SC)
    assert list(np.flatnonzero(stats.occupancy)) == [6, 7]
    # exactly aligned vehicle covers a single cell
    place(state, "S-L", 10, speed=2.0, kind=Kind.HV)
    assert list(np.flatnonzero(movement_stats(state, Movement.SL).occupancy)) == [7]


def test_vehicle_outside_zone_ignored(state):
    place(state, "E-C", 80, kind=Kind.HV)  # rear at 115, front at 120 < 150
    assert movement_stats(state, Movement.EC).queue_len == 0
    assert not movement_stats(state, Movement.EC).occupancy.any()


def test_distance_feature_clamped(state):
    b = ObservationBuilder()
    v = place(state, "E-C", 70, speed=5.0)
    assert b.distance_feature(state, v) == 1.0
    w = place(state, "W-C", 0.0, speed=0.0)
    assert b.distance_feature(state, w) == 0.0


def test_low_level_shares_macro_and_flags():
    s = SimState(IntersectionSpec(lanes_per_approach=3, shared_lanes=True))
    ego = place(s, "E-C", 20, speed=5.0, lane=1)
    place(s, "E-C", 35, speed=5.0, lane=0)  # RV to the left
    place(s, "E-C", 25, speed=5.0, lane=2, kind=Kind.HV)  # HV to the right: no flag
    place(s, "W-C", 25, speed=5.0, lane=2)  # other approach: no flag
    lo = low_level_obs(s, ego.id)
    hi = high_level_obs(s, ego.id)
    assert np.array_equal(lo.macro, hi[:-1])
    assert lo.micro[0] == hi[-1] == pytest.approx(0.4)
    assert tuple(lo.micro[1:]) == (1.0, 0.0)
    assert neighbour_lane_flags(s, ego) == (1.0, 0.0)
    assert lo.vector().shape == (99,)


def test_observation_requires_approaching_rv(state):
    hv = place(state, "E-C", 20, kind=Kind.HV)
    with pytest.raises(ValueError):
        high_level_obs(state, hv.id)
    inside = place(state, "W-C", -2, speed=3.0)
    with pytest.raises(ValueError):
        low_level_obs(state, inside.id)
    with pytest.raises(KeyError):
        high_level_obs(state, 999)


def test_builder_cache_refreshes_each_step(state):
    b = ObservationBuilder()
    rv = place(state, "E-C", 30, speed=0.0)
    before = b.high_level(state, rv.id).copy()
    for _ in range(30):
        step(state)
    after = b.high_level(state, rv.id)
    assert not np.array_equal(before, after)


# -- reward and metrics ----------------------------------------------------------------


def test_step_reward_hand_computed(state):
    _waiting(state, "E-C", 5, 600, kind=Kind.HV)  # 60 s -> 0.5
    _waiting(state, "W-C", 5, 2400, kind=Kind.HV)  # 240 s -> clamped 1
    _waiting(state, "N-C", -1, 120, kind=Kind.HV, speed=2.0)  # in the box, 12 s -> 0.1
    _waiting(state, "S-C", 100, 600, kind=Kind.HV)  # outside the zone
    assert step_reward(state) == pytest.approx(-1.6)


def test_step_reward_empty_is_zero(state):
    assert step_reward(state) == 0.0


def test_avg_waiting_time_from_log():
    ev = lambda t, vid, kind, detail="": Event(t, kind, vid, "E0", "E-C", detail)
    log = [
        ev(0.0, 1, "zone_enter"),
        ev(0.0, 2, "zone_enter"),
        ev(0.0, 3, "spawn", "HV"),
        ev(5.0, 1, "depart", "4.0"),
        ev(9.0, 2, "final", "10.0"),
        ev(9.0, 3, "final", "99.0"),  # never entered the zone
    ]
    assert final_waits(log) == {1: 4.0, 2: 10.0}
    assert avg_waiting_time(log) == pytest.approx(7.0)
    assert avg_waiting_time([]) == 0.0


def test_unregulated_ratio_and_queue(state):
    assert unregulated_ratio(state) == 1.0
    place(state, "E-C", 20)
    place(state, "E-C", 30)
    place(state, "N-L", 10)
    place(state, "S-C", 80)  # outside the zone
    assert unregulated_ratio(state) == pytest.approx(1 - 2 / 8)
    assert average_queue(state) == pytest.approx(3 / 8)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(MOVEMENTS), st.floats(0.0, 60.0), st.integers(0, 3000)), max_size=8))
def test_observation_bounded_property(specs):
    s = SimState(IntersectionSpec(lane_length=400))
    ego = s.add_vehicle(Kind.RV, Movement.EC, 1, pos=s.spec.entrance_line - 25.0, speed=3.0)
    for m, d, w in specs:
        pos = s.spec.entrance_line - d
        lane = s.spec.lanes_for(m)[0]
        if any(v.lane == lane and v.approach is m.approach and abs(v.pos - pos) < 6 for v in s.vehicles.values()):
            continue
        v = s.add_vehicle(Kind.HV, m, lane, pos=pos, speed=0.0)
        v.wait_steps = w
    obs = ObservationBuilder().high_level(s, ego.id)
    assert obs.shape == (97,)
    assert np.all(np.isfinite(obs)) and np.all((obs >= 0) & (obs <= 1))
    assert step_reward(s) <= 0.0
