"""Observation vectors, the shared waiting-time reward and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .core import MOVEMENTS, IntersectionSpec, Kind, Movement, Phase, VehicleState, in_control_zone
from .microsim import Event, SimState

N_CELLS = 10
W_MAX = 120.0


@dataclass(frozen=True)
class MovementStats:
    queue_len: int
    avg_wait: float
    occupancy: np.ndarray


@dataclass(frozen=True)
class LowLevelObs:
    macro: np.ndarray
    micro: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.macro, self.micro])


def obs_sizes(n_cells: int = N_CELLS) -> Tuple[int, int]:
    """Lengths of the (high-level, low-level) observation vectors."""
    macro = 16 + 8 * n_cells
    return macro + 1, macro + 3


def _occupancy(vehicles: Iterable[VehicleState], spec: IntersectionSpec, n_cells: int) -> np.ndarray:
    cells = np.zeros(n_cells)
    width = spec.control_zone_radius / n_cells
    start = spec.zone_start
    for v in vehicles:
        lo = max(v.pos - v.length, start)
        hi = min(v.pos, spec.entrance_line)
        if hi <= lo:
            continue
        first = int((lo - start) // width)
        last = int(np.ceil((hi - start) / width)) - 1
        cells[max(first, 0) : min(last, n_cells - 1) + 1] = 1.0
    return cells


def _in_approach_zone(v: VehicleState, spec: IntersectionSpec) -> bool:
    return v.phase is Phase.APPROACHING and v.pos - v.length < spec.entrance_line and v.pos > spec.zone_start


def movement_stats(state: SimState, j: Movement, n_cells: int = N_CELLS) -> MovementStats:
    """Queue length, mean queued wait and occupancy map of movement ``j``."""
    spec, v_stop = state.spec, state.params.v_stop
    members = [v for v in state.vehicles.values() if v.movement is j and _in_approach_zone(v, spec)]
    queue = [v for v in members if v.pos >= spec.zone_start and v.speed < v_stop]
    w = float(np.mean([v.wait_clock for v in queue])) if queue else 0.0
    return MovementStats(len(queue), w, _occupancy(members, spec, n_cells))


class ObservationBuilder:
    """Shared builder for both observation levels.

    The macroscopic block is computed once per simulation step and reused for
    every RV; ``high_level`` and ``low_level`` therefore share it exactly.
    """

    def __init__(self, n_cells: int = N_CELLS, w_max: float = W_MAX):
        self.n_cells = n_cells
        self.w_max = w_max
        self._key: Optional[Tuple[int, int]] = None
        self._macro: Optional[np.ndarray] = None
        self._rv_lanes: Dict[Tuple[object, int], int] = {}

    def _refresh(self, state: SimState) -> None:
        key = (id(state), state.step_index)
        if self._key != key or self._macro is None:
            self._macro = self._build_macro(state)
            self._rv_lanes = _rv_lane_counts(state)
            self._key = key

    def macro(self, state: SimState) -> np.ndarray:
        self._refresh(state)
        return self._macro

    def invalidate(self) -> None:
        self._key = None

    def _build_macro(self, state: SimState) -> np.ndarray:
        spec, v_stop = state.spec, state.params.v_stop
        n = self.n_cells
        groups: Dict[Movement, List[VehicleState]] = {m: [] for m in MOVEMENTS}
        for v in state.vehicles.values():
            if _in_approach_zone(v, spec):
                groups[v.movement].append(v)
        lw = np.zeros(16)
        occ = np.zeros(8 * n)
        per_lane_capacity = spec.control_zone_radius / state.params.vehicle_length
        for k, m in enumerate(MOVEMENTS):
            members = groups[m]
            queue = [v for v in members if v.pos >= spec.zone_start and v.speed < v_stop]
            if queue:
                capacity = per_lane_capacity * len(spec.lanes_for(m))
                lw[2 * k] = min(len(queue) / capacity, 1.0)
                lw[2 * k + 1] = min(sum(v.wait_clock for v in queue) / len(queue) / self.w_max, 1.0)
            if members:
                occ[k * n : (k + 1) * n] = _occupancy(members, spec, n)
        return np.concatenate([lw, occ])

    def distance_feature(self, state: SimState, v: VehicleState) -> float:
        d = state.spec.entrance_line - v.pos
        return float(min(max(d / state.spec.control_zone_radius, 0.0), 1.0))

    def high_level(self, state: SimState, vid: int) -> np.ndarray:
        v = _check_rv(state, vid)
        return np.append(self.macro(state), self.distance_feature(state, v))

    def low_level(self, state: SimState, vid: int) -> LowLevelObs:
        v = _check_rv(state, vid)
        self._refresh(state)
        a = v.movement.approach
        cl = 1.0 if self._rv_lanes.get((a, v.lane - 1)) else 0.0
        cr = 1.0 if self._rv_lanes.get((a, v.lane + 1)) else 0.0
        micro = np.array([self.distance_feature(state, v), cl, cr])
        return LowLevelObs(self.macro(state).copy(), micro)


def _check_rv(state: SimState, vid: int) -> VehicleState:
    v = state.vehicles.get(vid)
    if v is None:
        raise KeyError(f"no vehicle {vid}")
    if v.kind is not Kind.RV:
        raise ValueError(f"vehicle {vid} is not an RV")
    if v.phase is not Phase.APPROACHING:
        raise ValueError(f"vehicle {vid} is {v.phase.value}, observations need an approaching RV")
    return v


def _rv_lane_counts(state: SimState) -> Dict[Tuple[object, int], int]:
    start = state.spec.zone_start
    counts: Dict[Tuple[object, int], int] = {}
    for v in state.vehicles.values():
        if v.kind is Kind.RV and v.phase is Phase.APPROACHING and v.pos >= start:
            key = (v.movement.approach, v.lane)
            counts[key] = counts.get(key, 0) + 1
    return counts


def neighbour_lane_flags(state: SimState, ego: VehicleState) -> Tuple[float, float]:
    """(cl, cr): whether another RV occupies the adjacent left/right lane inside the zone."""
    spec = state.spec
    left = right = 0.0
    for v in state.vehicles.values():
        if v.id == ego.id or v.kind is not Kind.RV or v.approach is not ego.approach:
            continue
        if v.phase is not Phase.APPROACHING or v.pos < spec.zone_start:
            continue
        if v.lane == ego.lane - 1:
            left = 1.0
        elif v.lane == ego.lane + 1:
            right = 1.0
    return left, right


_default_builder = ObservationBuilder()


def high_level_obs(state: SimState, rv: int) -> np.ndarray:
    return _default_builder.high_level(state, rv)


def low_level_obs(state: SimState, rv: int) -> LowLevelObs:
    return _default_builder.low_level(state, rv)


def step_reward(state: SimState, w_max: float = W_MAX) -> float:
    """Negative sum of clamped normalised wait clocks of vehicles in the control zone."""
    total = 0.0
    for v in state.vehicles.values():
        if v.wait_steps and in_control_zone(v, state.spec):
            total += min(v.wait_clock / w_max, 1.0)
    return -total


def final_waits(event_log: Iterable[Event]) -> Dict[int, float]:
    """Final wait clock of every vehicle that entered the control zone."""
    entered: Dict[int, float] = {}
    for e in event_log:
        if e.event_type == "zone_enter":
            entered.setdefault(e.vehicle_id, 0.0)
        elif e.event_type in ("depart", "final") and e.vehicle_id in entered:
            entered[e.vehicle_id] = float(e.detail)
    return entered


def avg_waiting_time(event_log: Iterable[Event]) -> float:
    """Mean final wait clock over vehicles that entered the control zone (0 if none did)."""
    waits = final_waits(event_log)
    if not waits:
        return 0.0
    return float(np.mean(list(waits.values())))


def unregulated_ratio(state: SimState) -> float:
    """Fraction of approach lanes with no RV inside the control zone."""
    spec = state.spec
    regulated = set()
    for v in state.vehicles.values():
        if v.kind is Kind.RV and v.phase is Phase.APPROACHING and v.pos >= spec.zone_start:
            regulated.add((v.approach, v.lane))
    lanes = spec.lanes()
    return 1.0 - len(regulated) / len(lanes)


def average_queue(state: SimState) -> float:
    spec, v_stop = state.spec, state.params.v_stop
    n = sum(
        1
        for v in state.vehicles.values()
        if v.phase is Phase.APPROACHING and v.pos >= spec.zone_start and v.speed < v_stop
    )
    return n / 8.0
