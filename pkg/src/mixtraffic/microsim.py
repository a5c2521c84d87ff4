"""Fixed-timestep microscopic simulation of the intersection.

HVs follow the Intelligent Driver Model. RVs execute externally supplied
commands. Both are subject to the same collision guard and to the conflict
manager that holds vehicles at the entrance line when their movement
conflicts with traffic already committed to the box.

The collision guard maintains a discrete-time safe-distance invariant for
every follower/leader pair sharing a lane::

    gap + D(v_leader) >= D(v_follower)

where ``D`` is the exact stopping distance of the semi-implicit integrator
braking at ``b_emergency``. Any state satisfying it can be kept collision
free by braking, so overriding unsafe commands with full braking keeps every
same-lane gap non-negative.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, Iterable, List, Mapping, NamedTuple, Optional, Set, Tuple

import numpy as np

from .core import (
    MOVEMENTS,
    Approach,
    IntersectionSpec,
    Kind,
    Movement,
    Phase,
    VehicleState,
    conflicts,
)

SAFETY_EPS = 1e-9


class CollisionError(AssertionError):
    """A follower reached its leader; the collision guard failed upstream."""


@dataclass(frozen=True)
class IdmParams:
    v0: float = 13.9
    T: float = 1.5
    a_max: float = 2.6
    b_comf: float = 4.5
    s0: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        for name in ("v0", "T", "a_max", "b_comf", "s0", "delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IdmParams.{name} must be strictly positive")


@dataclass(frozen=True)
class SimParams:
    """Dynamics constants shared by every vehicle."""

    dt: float = 0.1
    v_stop: float = 0.1
    b_emergency: float = 9.0
    vehicle_length: float = 5.0
    lc_cooldown: float = 2.0
    hold_horizon: float = 5.0
    hold_stop_offset: float = 0.5
    a_max_rv: float = 2.6
    v_max_rv: float = 13.9
    idm: IdmParams = field(default_factory=IdmParams)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.b_emergency < self.idm.b_comf:
            raise ValueError("b_emergency must be at least the comfortable deceleration")


class LaneChange(str, Enum):
    LEFT = "Left"
    KEEP = "Keep"
    RIGHT = "Right"


@dataclass(frozen=True)
class RvCommand:
    accel: float
    lane_change: LaneChange = LaneChange.KEEP


class LaneChangeRejection(str, Enum):
    NO_ADJACENT_LANE = "NoAdjacentLane"
    MOVEMENT_FORBIDDEN = "MovementForbidden"
    UNSAFE_GAP = "UnsafeGap"
    COOLDOWN_ACTIVE = "CooldownActive"
    NOT_ELIGIBLE = "NotEligible"


class Event(NamedTuple):
    time: float
    event_type: str
    vehicle_id: int
    lane: str
    movement: str
    detail: str


EVENT_COLUMNS = ("time", "event_type", "vehicle_id", "lane", "movement", "detail")


def idm_accel(v: float, gap: float, v_leader: float, p: IdmParams, b_emergency: float = 9.0) -> float:
    """IDM acceleration, floored at ``-b_emergency``.

    ``gap`` is the bumper-to-bumper distance to the leader, ``math.inf`` when
    the lane ahead is empty.
    """
    free = (v / p.v0) ** p.delta
    if math.isinf(gap):
        interaction = 0.0
    else:
        if gap <= 0:
            raise CollisionError(f"IDM evaluated at non-positive gap {gap!r}")
        dv = v - v_leader
        s_star = p.s0 + max(0.0, v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf)))
        interaction = (s_star / gap) ** 2
    return max(p.a_max * (1.0 - free - interaction), -b_emergency)


def stopping_distance(v: float, b: float, dt: float) -> float:
    """Distance covered by the semi-implicit integrator braking at ``b`` until rest."""
    if v <= 0:
        return 0.0
    n = math.floor(v / (b * dt))
    return dt * (n * v - b * dt * n * (n + 1) / 2.0)


@dataclass
class SimState:
    spec: IntersectionSpec
    params: SimParams = field(default_factory=SimParams)
    step_index: int = 0
    vehicles: Dict[int, VehicleState] = field(default_factory=dict)
    event_log: List[Event] = field(default_factory=list)
    next_id: int = 0
    holds: Set[int] = field(default_factory=set)
    departures: int = 0
    last_departure_step: int = 0

    @property
    def time(self) -> float:
        return self.step_index * self.params.dt

    def log(self, event_type: str, v: Optional[VehicleState], detail: str = "") -> None:
        if v is None:
            self.event_log.append(Event(round(self.time, 6), event_type, -1, "", "", detail))
        else:
            self.event_log.append(
                Event(round(self.time, 6), event_type, v.id, lane_label(v), v.movement.label, detail)
            )

    def add_vehicle(
        self, kind: Kind, movement: Movement, lane: int, pos: float = 0.0, speed: float = 0.0
    ) -> VehicleState:
        v = VehicleState(
            id=self.next_id,
            kind=kind,
            movement=movement,
            lane=lane,
            pos=pos,
            speed=speed,
            dt=self.params.dt,
            length=self.params.vehicle_length,
        )
        self.next_id += 1
        self.vehicles[v.id] = v
        return v

    def lane_vehicles(self, approach: Approach, lane: int) -> List[VehicleState]:
        """Vehicles on a lane-extended path, front first (includes in-box vehicles)."""
        out = [v for v in self.vehicles.values() if v.lane == lane and v.movement.approach is approach]
        out.sort(key=lambda v: (-v.pos, v.id))
        return out

    def paths(self) -> Dict[Tuple[Approach, int], List[VehicleState]]:
        groups: Dict[Tuple[Approach, int], List[VehicleState]] = {}
        for v in self.vehicles.values():
            groups.setdefault((v.movement.approach, v.lane), []).append(v)
        for members in groups.values():
            members.sort(key=lambda v: (-v.pos, v.id))
        return groups

    def rvs(self) -> List[VehicleState]:
        return [v for v in self.vehicles.values() if v.kind is Kind.RV]

    def export_events(self, path=None, comment: str = "") -> str:
        """Write the event log as CSV; returns the text."""
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for e in self.event_log:
            w.writerow([f"{e.time:.3f}", e.event_type, e.vehicle_id, e.lane, e.movement, e.detail])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def lane_label(v: VehicleState) -> str:
    return f"{v.approach.value}{v.lane}"


def gap_between(follower: VehicleState, leader: VehicleState) -> float:
    return leader.pos - leader.length - follower.pos


def _is_safe(gap: float, v_follower: float, v_leader: float, p: SimParams) -> bool:
    if gap < 0:
        return False
    b, dt = p.b_emergency, p.dt
    return gap + stopping_distance(v_leader, b, dt) - stopping_distance(v_follower, b, dt) >= -SAFETY_EPS


def max_safe_speed(gap: float, v_leader: float, p: SimParams, cap: float) -> float:
    """Largest speed <= cap for a vehicle ``gap`` metres behind a leader that keeps the invariant."""
    if gap < 0:
        return 0.0
    if _is_safe(gap, cap, v_leader, p):
        return cap
    lo, hi = 0.0, cap
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _is_safe(gap, mid, v_leader, p):
            lo = mid
        else:
            hi = mid
    return lo


# -- spawning ---------------------------------------------------------------


@dataclass
class SpawnProcess:
    """Poisson arrivals per movement; each arrival is an RV with probability ``rv_penetration``."""

    rate_per_movement: Mapping[Movement, float]
    rv_penetration: float = 0.0
    rng_seed: int = 0
    backlog: Dict[Movement, Deque[Kind]] = field(init=False)
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.rv_penetration <= 1.0:
            raise ValueError("rv_penetration must lie in [0, 1]")
        rates = {m: float(self.rate_per_movement.get(m, 0.0)) for m in MOVEMENTS}
        if any(r < 0 for r in rates.values()):
            raise ValueError("arrival rates must be non-negative")
        self.rate_per_movement = rates
        self.backlog = {m: deque() for m in MOVEMENTS}
        self.rng = np.random.default_rng(self.rng_seed)


def _insertion_speed(state: SimState, approach: Approach, lane: int) -> Optional[float]:
    """Speed at which a new vehicle may enter at pos 0, or None when the lane is blocked."""
    p = state.params
    members = state.lane_vehicles(approach, lane)
    cap = p.idm.v0
    if not members:
        return cap
    last = members[-1]
    gap = last.pos - last.length
    if gap < p.idm.s0:
        return None
    return max_safe_speed(gap, last.speed, p, min(cap, last.speed + 0.5 * (gap - p.idm.s0)))


def spawn(proc: SpawnProcess, state: SimState, dt: Optional[float] = None) -> SimState:
    """Draw this step's arrivals and insert as many backlogged vehicles as fit."""
    dt = state.params.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = proc.rng
    for m in MOVEMENTS:
        rate = proc.rate_per_movement[m]
        n = int(rng.poisson(rate * dt / 3600.0)) if rate > 0 else 0
        for _ in range(n):
            kind = Kind.RV if rng.random() < proc.rv_penetration else Kind.HV
            proc.backlog[m].append(kind)
    for m in MOVEMENTS:
        queue = proc.backlog[m]
        while queue:
            best = None
            for lane in state.spec.lanes_for(m):
                speed = _insertion_speed(state, m.approach, lane)
                if speed is None:
                    continue
                members = state.lane_vehicles(m.approach, lane)
                room = members[-1].pos if members else math.inf
                if best is None or room > best[0]:
                    best = (room, lane, speed)
            if best is None:
                break
            kind = queue.popleft()
            v = state.add_vehicle(kind, m, best[1], pos=0.0, speed=best[2])
            state.log("spawn", v, kind.value)
    return state


# -- lane changes -------------------------------------------------------------


def lane_change_check(
    state: SimState, v: VehicleState, direction: LaneChange
) -> Optional[LaneChangeRejection]:
    p = state.params
    if v.kind is not Kind.RV or v.phase is not Phase.APPROACHING:
        return LaneChangeRejection.NOT_ELIGIBLE
    if v.lc_cooldown > 1e-12:
        return LaneChangeRejection.COOLDOWN_ACTIVE
    target = v.lane - 1 if direction is LaneChange.LEFT else v.lane + 1
    if not 0 <= target < state.spec.lanes_per_approach:
        return LaneChangeRejection.NO_ADJACENT_LANE
    if not state.spec.permits(target, v.movement):
        return LaneChangeRejection.MOVEMENT_FORBIDDEN
    leader = follower = None
    for other in state.lane_vehicles(v.approach, target):
        if other.pos >= v.pos:
            leader = other
        elif follower is None:
            follower = other
    if leader is not None:
        gap = gap_between(v, leader)
        if gap <= p.idm.s0 or not _is_safe(gap, v.speed, leader.speed, p):
            return LaneChangeRejection.UNSAFE_GAP
    if follower is not None:
        gap = gap_between(follower, v)
        if gap <= p.idm.s0 or not _is_safe(gap, follower.speed, v.speed, p):
            return LaneChangeRejection.UNSAFE_GAP
    return None


def apply_lane_change(
    state: SimState, vid: int, direction: LaneChange
) -> Tuple[SimState, Optional[LaneChangeRejection]]:
    """Instantaneous lateral swap. Returns the state and the rejection reason, if any."""
    v = state.vehicles[vid]
    if direction is LaneChange.KEEP:
        return state, None
    reason = lane_change_check(state, v, direction)
    if reason is not None:
        state.log("lc_reject", v, f"{direction.value}:{reason.value}")
        return state, reason
    old = lane_label(v)
    v.lane += -1 if direction is LaneChange.LEFT else 1
    v.lc_cooldown = state.params.lc_cooldown
    state.log("lane_change", v, f"{old}->{lane_label(v)}")
    return state, None


# -- conflict arbitration -----------------------------------------------------


def projected_entry_time(v: VehicleState, spec: IntersectionSpec, p: SimParams) -> float:
    """Time to reach the entrance accelerating at a_max up to v0."""
    if v.phase is Phase.INSIDE_BOX:
        return -math.inf
    d = max(spec.entrance_line - v.pos, 0.0)
    if d <= 0:
        return 0.0
    a, vmax = p.idm.a_max, max(p.idm.v0, v.speed)
    t1 = (vmax - v.speed) / a
    d1 = 0.5 * (v.speed + vmax) * t1
    if d <= d1:
        return (-v.speed + math.sqrt(v.speed * v.speed + 2 * a * d)) / a
    return t1 + (d - d1) / vmax


def arbitration_horizon(v: VehicleState, p: SimParams) -> float:
    reach = (v.speed + p.idm.a_max * p.dt) * p.dt
    return max(p.hold_horizon, stopping_distance(v.speed, p.idm.b_comf, p.dt) + reach)


def is_committed(v: VehicleState, spec: IntersectionSpec, p: SimParams) -> bool:
    """True when the vehicle can no longer stop before the entrance line."""
    d = spec.entrance_line - v.pos
    return stopping_distance(v.speed, p.b_emergency, p.dt) > d + SAFETY_EPS


def conflict_manager(state: SimState, exclude: Iterable[int] = ()) -> Set[int]:
    """Vehicle ids that must hold at the entrance line this step.

    Candidates are vehicles inside the box plus approaching vehicles within
    their arbitration horizon (``hold_horizon`` or their comfortable stopping
    distance, whichever is larger). For every conflicting candidate pair the
    one with the lower priority is held. Priority: inside the box, then
    vehicles already unable to stop, then earliest projected entry, then id.
    Vehicles in ``exclude`` are already held by an external controller and
    take no part in arbitration.
    """
    spec, p = state.spec, state.params
    skip = set(exclude)
    line = spec.entrance_line
    # cheap outer bound on arbitration_horizon: the discrete stopping distance
    # never exceeds v^2 / 2b
    two_b, dt, a_max, floor_h = 2.0 * p.idm.b_comf, p.dt, p.idm.a_max, p.hold_horizon
    ranked = []
    for v in state.vehicles.values():
        if v.id in skip:
            continue
        if v.phase is Phase.INSIDE_BOX:
            ranked.append(((0, -math.inf, v.id), v))
        elif v.phase is Phase.APPROACHING:
            d = line - v.pos
            sp = v.speed
            if d > floor_h and d > sp * sp / two_b + (sp + a_max * dt) * dt + 1e-9:
                continue
            if d <= arbitration_horizon(v, p):
                tier = 1 if is_committed(v, spec, p) else 2
                ranked.append(((tier, projected_entry_time(v, spec, p), v.id), v))
    ranked.sort(key=lambda kv: kv[0])
    held: Set[int] = set()
    for i, (_, a) in enumerate(ranked):
        for _, b in ranked[i + 1 :]:
            if b.id not in held and conflicts(a.movement, b.movement):
                held.add(b.id)
    return {vid for vid in held if state.vehicles[vid].phase is Phase.APPROACHING}


# -- longitudinal control -------------------------------------------------------


def _leader_map(state: SimState, groups=None) -> Dict[int, Optional[VehicleState]]:
    leaders: Dict[int, Optional[VehicleState]] = {}
    for members in (state.paths() if groups is None else groups).values():
        prev = None
        for v in members:
            leaders[v.id] = prev
            prev = v
    return leaders


def _line_obstacle_gap(v: VehicleState, spec: IntersectionSpec) -> float:
    return spec.entrance_line - v.pos


def emergency_guard(
    state: SimState,
    proposed: Mapping[int, float],
    dt: Optional[float] = None,
    holds: Optional[Iterable[int]] = None,
    groups=None,
) -> Dict[int, float]:
    """Replace accelerations that would break the safe-distance invariant with full braking.

    Held vehicles additionally treat the entrance line as a stopped obstacle.
    Lanes are processed front to back so each follower is checked against its
    leader's final post-step state.
    """
    p = state.params
    dt = p.dt if dt is None else dt
    b = p.b_emergency
    held = set(state.holds if holds is None else holds)
    line = state.spec.entrance_line
    approaching = Phase.APPROACHING
    sd = stopping_distance
    out: Dict[int, float] = {}
    for members in (state.paths() if groups is None else groups).values():
        # post-step (rear bumper, speed, stopping distance) of the vehicle ahead
        lead = None
        for v in members:
            a = float(proposed.get(v.id, v.accel))
            if -b > a:
                a = -b
            on_hold = v.id in held and v.phase is approaching
            if lead is not None or on_hold:
                v_new = v.speed + a * dt
                if v_new < 0.0:
                    v_new = 0.0
                pos_new = v.pos + v_new * dt
                sd_f = sd(v_new, b, dt)
                safe = True
                if lead is not None:
                    gap = lead[0] - pos_new
                    safe = gap >= 0 and gap + lead[2] - sd_f >= -SAFETY_EPS
                if safe and on_hold:
                    gap = line - pos_new
                    safe = gap >= 0 and gap + 0.0 - sd_f >= -SAFETY_EPS
                if not safe:
                    a = -b
                    state.log("guard", v, f"{proposed.get(v.id, v.accel):.3f}")
            v_new = v.speed + a * dt
            if v_new < 0.0:
                v_new = 0.0
            lead = (v.pos + v_new * dt - v.length, v_new, sd(v_new, b, dt))
            out[v.id] = a
    return out


def proposed_accelerations(
    state: SimState, rv_commands: Mapping[int, RvCommand], leaders=None
) -> Dict[int, float]:
    """Nominal accelerations before the guard: IDM for HVs and un-commanded RVs."""
    spec, p = state.spec, state.params
    leaders = _leader_map(state) if leaders is None else leaders
    q, b_em = p.idm, p.b_emergency
    # idm_accel inlined (same arithmetic): this loop runs for every vehicle every step
    a_max, v0, delta, s0, T = q.a_max, q.v0, q.delta, q.s0, q.T
    two_sqrt_ab = 2.0 * math.sqrt(q.a_max * q.b_comf)
    out: Dict[int, float] = {}
    for v in state.vehicles.values():
        lead = leaders.get(v.id)
        sp = v.speed
        free = (sp / v0) ** delta
        if lead is not None:
            gap = lead.pos - lead.length - v.pos
            if gap <= 0:
                raise CollisionError(f"vehicle {v.id} overlaps leader {lead.id}")
            s_star = s0 + max(0.0, sp * T + sp * (sp - lead.speed) / two_sqrt_ab)
            idm = max(a_max * (1.0 - free - (s_star / gap) ** 2), -b_em)
        else:
            idm = max(a_max * (1.0 - free), -b_em)
        cmd = rv_commands.get(v.id)
        if cmd is None:
            a = idm
        else:
            a = min(cmd.accel, p.a_max_rv)
            if lead is not None:
                # commands never out-accelerate car following toward a real leader
                a = min(a, idm)
            if v.speed + a * p.dt > p.v_max_rv:
                a = (p.v_max_rv - v.speed) / p.dt
        if v.id in state.holds and v.phase is Phase.APPROACHING:
            line_gap = _line_obstacle_gap(v, spec) + p.idm.s0 - p.hold_stop_offset
            a = min(a, idm_accel(v.speed, max(line_gap, 1e-6), 0.0, p.idm, p.b_emergency))
        out[v.id] = a
    return out


def step(
    state: SimState,
    rv_commands: Optional[Mapping[int, RvCommand]] = None,
    dt: Optional[float] = None,
    extra_holds: Iterable[int] = (),
) -> SimState:
    """Advance the simulation by one step of ``dt`` (defaults to ``params.dt``).

    ``extra_holds`` lets an external controller (the fixed-time signal) hold
    vehicles at the line with the same mechanism as the conflict manager.
    """
    p = state.params
    if dt is not None and abs(dt - p.dt) > 1e-12:
        raise ValueError(f"this simulation runs at dt={p.dt}")
    dt = p.dt
    rv_commands = rv_commands or {}
    for vid in rv_commands:
        v = state.vehicles.get(vid)
        if v is None or v.kind is not Kind.RV:
            raise KeyError(f"command for unknown or non-RV vehicle {vid}")

    external = {
        vid for vid in extra_holds if vid in state.vehicles and state.vehicles[vid].phase is Phase.APPROACHING
    }
    new_holds = conflict_manager(state, exclude=external) | external
    for vid in sorted(new_holds - state.holds):
        state.log("hold", state.vehicles[vid])
    for vid in sorted(state.holds - new_holds):
        if vid in state.vehicles:
            state.log("release", state.vehicles[vid])
    state.holds = new_holds

    for vid, cmd in rv_commands.items():
        if cmd.lane_change is not LaneChange.KEEP:
            apply_lane_change(state, vid, cmd.lane_change)

    groups = state.paths()
    leaders = _leader_map(state, groups)
    proposed = proposed_accelerations(state, rv_commands, leaders)
    final = emergency_guard(state, proposed, dt, state.holds, groups)
    spec = state.spec
    for v in list(state.vehicles.values()):
        a = final[v.id]
        v_new = v.speed + a * dt
        if v_new < 0:
            if v.speed > 0:
                state.log("speed_clamp", v, f"{v_new:.6f}")
            v_new = 0.0
        v.accel = a
        v.speed = v_new
        v.pos += v_new * dt
        if v.lc_cooldown > 0:
            v.lc_cooldown = max(0.0, v.lc_cooldown - dt)

    state.step_index += 1
    line, exit_line, zone_start, v_stop = spec.entrance_line, spec.exit_line, spec.zone_start, p.v_stop
    for v in list(state.vehicles.values()):
        if v.phase is Phase.APPROACHING and v.pos > line:
            if v.id in state.holds:
                raise AssertionError(f"held vehicle {v.id} crossed the entrance line")
            v.advance_phase(Phase.INSIDE_BOX)
            state.log("box_enter", v)
        if v.phase is Phase.INSIDE_BOX and v.pos >= exit_line:
            v.advance_phase(Phase.DEPARTED)
            state.log("depart", v, _fmt_wait(v))
            del state.vehicles[v.id]
            state.departures += 1
            state.last_departure_step = state.step_index
            continue
        if v.phase is Phase.INSIDE_BOX or v.pos >= zone_start:
            if not v.in_zone_seen:
                v.in_zone_seen = True
                state.log("zone_enter", v)
            if v.speed < v_stop:
                v.wait_steps += 1
    state.holds &= set(state.vehicles)
    return state


def _fmt_wait(v: VehicleState) -> str:
    return f"{v.wait_clock:.6f}"


def finalize(state: SimState) -> SimState:
    """Record the wait clock of every vehicle still in the network (end of horizon)."""
    for v in state.vehicles.values():
        if v.in_zone_seen:
            state.log("final", v, _fmt_wait(v))
    return state


def min_same_path_gap(state: SimState) -> float:
    best = math.inf
    for members in state.paths().values():
        for lead, fol in zip(members, members[1:]):
            best = min(best, gap_between(fol, lead))
    return best


def conflicting_inside_pairs(state: SimState) -> List[Tuple[int, int]]:
    inside = [v for v in state.vehicles.values() if v.phase is Phase.INSIDE_BOX]
    return [
        (a.id, b.id)
        for i, a in enumerate(inside)
        for b in inside[i + 1 :]
        if conflicts(a.movement, b.movement)
    ]
