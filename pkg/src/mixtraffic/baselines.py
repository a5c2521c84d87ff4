"""Comparison controllers: a fixed-time signal and a Go/Stop-only RV controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import FrozenSet, Set, Tuple

from .core import MOVEMENTS, Kind, Movement, Phase, VehicleState, conflicts
from .microsim import LaneChange, RvCommand, SimParams, SimState, idm_accel, is_committed
from .policy import Decision


@dataclass(frozen=True)
class SignalPhase:
    allowed: FrozenSet[Movement]
    green: float
    all_red: float = 0.0

    @property
    def duration(self) -> float:
        return self.green + self.all_red


@dataclass(frozen=True)
class SignalPlan:
    phases: Tuple[SignalPhase, ...]

    def __post_init__(self):
        if not self.phases:
            raise ValueError("a signal plan needs at least one phase")
        covered: Set[Movement] = set()
        for k, ph in enumerate(self.phases):
            if ph.green <= 0 or ph.all_red < 0:
                raise ValueError(f"phase {k}: green must be positive and all-red non-negative")
            for a in ph.allowed:
                for b in ph.allowed:
                    if conflicts(a, b):
                        raise ValueError(f"phase {k} allows conflicting movements {a.label} and {b.label}")
            covered |= ph.allowed
        missing = set(MOVEMENTS) - covered
        if missing:
            raise ValueError("signal plan never serves " + ", ".join(sorted(m.label for m in missing)))

    @classmethod
    def default(cls, green: float = 30.0, all_red: float = 3.0) -> "SignalPlan":
        groups = [
            (Movement.SC, Movement.NC),
            (Movement.SL, Movement.NL),
            (Movement.EC, Movement.WC),
            (Movement.EL, Movement.WL),
        ]
        return cls(tuple(SignalPhase(frozenset(g), green, all_red) for g in groups))

    @property
    def cycle(self) -> float:
        return sum(ph.duration for ph in self.phases)

    def phase_at(self, t: float) -> Tuple[int, bool]:
        """(phase index, whether the phase is in green) at time ``t``."""
        x = math.fmod(t, self.cycle)
        for k, ph in enumerate(self.phases):
            if x < ph.duration - 1e-9:
                return k, x < ph.green - 1e-9
            x -= ph.duration
        return 0, True

    def allowed_at(self, t: float) -> FrozenSet[Movement]:
        k, green = self.phase_at(t)
        return self.phases[k].allowed if green else frozenset()


def tl_control(state: SimState, plan: SignalPlan) -> Set[int]:
    """Approaching vehicles facing red. Vehicles already unable to stop are let through."""
    allowed = plan.allowed_at(state.time)
    return {
        v.id
        for v in state.vehicles.values()
        if v.phase is Phase.APPROACHING
        and v.movement not in allowed
        and not is_committed(v, state.spec, state.params)
    }


@dataclass(frozen=True)
class HlOnlyConfig:
    stop_decel: float = 4.5

    def check(self, sim: SimParams) -> "HlOnlyConfig":
        if not 0 < self.stop_decel <= sim.b_emergency:
            raise ValueError("stop_decel must lie in (0, b_emergency]")
        return self


def stop_at_line_accel(v: VehicleState, state: SimState, stop_decel: float) -> float:
    """Car-following toward a standing obstacle at the entrance line."""
    p = state.params
    d = state.spec.entrance_line - v.pos
    gap = max(d + p.idm.s0 - p.hold_stop_offset, 1e-6)
    idm = replace(p.idm, b_comf=stop_decel)
    return idm_accel(v.speed, gap, 0.0, idm, p.b_emergency)


def hl_only_act(state: SimState, rv: int, decision: Decision, cfg: HlOnlyConfig = HlOnlyConfig()) -> RvCommand:
    """Go: full acceleration. Stop: brake to a halt at the entrance line. Never changes lanes."""
    v = state.vehicles[rv]
    if v.kind is not Kind.RV or v.phase is not Phase.APPROACHING:
        raise ValueError("hl_only_act needs an approaching RV")
    if decision is Decision.GO:
        return RvCommand(state.params.a_max_rv, LaneChange.KEEP)
    return RvCommand(stop_at_line_accel(v, state, cfg.stop_decel), LaneChange.KEEP)
