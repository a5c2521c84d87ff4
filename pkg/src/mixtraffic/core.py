"""Intersection geometry, movement taxonomy and the conflict-free pair algebra.

Every approach lane has its own 1-D longitudinal axis. A vehicle's ``pos`` is
the coordinate of its front bumper along that axis: 0 is the spawn point and
``entrance_line`` is where the lane meets the intersection box. The axis
continues through the box, so a vehicle inside the box has
``entrance_line < pos < entrance_line + interior_length``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Mapping, Tuple


class Approach(str, Enum):
    E = "E"
    W = "W"
    N = "N"
    S = "S"


class Turn(str, Enum):
    L = "L"
    C = "C"


class Movement(Enum):
    """The eight conflict-prone traffic streams, in observation order.

    Right turns are deliberately absent.
    """

    EL = (Approach.E, Turn.L)
    EC = (Approach.E, Turn.C)
    WL = (Approach.W, Turn.L)
    WC = (Approach.W, Turn.C)
    NL = (Approach.N, Turn.L)
    NC = (Approach.N, Turn.C)
    SL = (Approach.S, Turn.L)
    SC = (Approach.S, Turn.C)

    def __init__(self, approach: Approach, turn: Turn):
        # plain attributes: these are read in the simulator's inner loops
        self.approach = approach
        self.turn = turn
        self.label = f"{approach.value}-{turn.value}"

    @classmethod
    def parse(cls, text: str) -> "Movement":
        """Parse ``"E-C"`` / ``"EC"`` style labels."""
        key = text.strip().upper().replace("-", "").replace("_", "")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown movement {text!r}") from None

    @classmethod
    def of(cls, approach: Approach | str, turn: Turn | str) -> "Movement":
        return cls((Approach(approach), Turn(turn)))

    def __str__(self) -> str:
        return self.label


MOVEMENTS: Tuple[Movement, ...] = tuple(Movement)

CONFLICT_FREE: FrozenSet[FrozenSet[Movement]] = frozenset(
    frozenset(pair)
    for pair in [
        (Movement.SC, Movement.NC),
        (Movement.WC, Movement.EC),
        (Movement.SL, Movement.NL),
        (Movement.EL, Movement.WL),
        (Movement.SC, Movement.SL),
        (Movement.EC, Movement.EL),
        (Movement.NC, Movement.NL),
        (Movement.WC, Movement.WL),
    ]
)


def conflicts(a: Movement, b: Movement) -> bool:
    """True when movements ``a`` and ``b`` may not share the box."""
    if a is b:
        return False
    return frozenset((a, b)) not in CONFLICT_FREE


class Kind(str, Enum):
    RV = "RV"
    HV = "HV"


class Phase(str, Enum):
    APPROACHING = "Approaching"
    INSIDE_BOX = "InsideBox"
    DEPARTED = "Departed"


_PHASE_ORDER = {Phase.APPROACHING: 0, Phase.INSIDE_BOX: 1, Phase.DEPARTED: 2}


def _dedicated_lanes(n: int) -> Tuple[FrozenSet[Turn], ...]:
    if n == 1:
        return (frozenset({Turn.L, Turn.C}),)
    # leftmost lane turns left, the rest go straight across
    return (frozenset({Turn.L}),) + tuple(frozenset({Turn.C}) for _ in range(n - 1))


@dataclass(frozen=True)
class IntersectionSpec:
    """Static geometry of the four-way intersection.

    Lane index 0 is the leftmost lane of an approach; ``Left`` lane changes
    decrease the index. ``lane_turns[i]`` lists the turns permitted from lane
    ``i`` and is shared by all four approaches.
    """

    lanes_per_approach: int = 2
    lane_length: float = 200.0
    interior_length: float = 20.0
    control_zone_radius: float = 50.0
    shared_lanes: bool = False
    lane_turns: Tuple[FrozenSet[Turn], ...] = field(default=())

    def __post_init__(self):
        if self.lanes_per_approach < 1:
            raise ValueError("lanes_per_approach must be >= 1")
        if not self.lane_turns:
            if self.shared_lanes:
                turns = tuple(frozenset({Turn.L, Turn.C}) for _ in range(self.lanes_per_approach))
            else:
                turns = _dedicated_lanes(self.lanes_per_approach)
            object.__setattr__(self, "lane_turns", turns)
        if len(self.lane_turns) != self.lanes_per_approach:
            raise ValueError("lane_turns must list one turn set per lane")
        if self.control_zone_radius < 30.0:
            raise ValueError("control_zone_radius must be >= 30 m to enclose the speed-limit bands")
        if self.control_zone_radius > self.lane_length:
            raise ValueError("control_zone_radius cannot exceed lane_length")
        if self.interior_length <= 0:
            raise ValueError("interior_length must be positive")
        for turn in Turn:
            if not any(turn in allowed for allowed in self.lane_turns):
                raise ValueError(f"no lane permits turn {turn.value}")

    @property
    def entrance_line(self) -> float:
        return self.lane_length

    @property
    def exit_line(self) -> float:
        return self.lane_length + self.interior_length

    @property
    def zone_start(self) -> float:
        return self.lane_length - self.control_zone_radius

    @property
    def lane_to_movement(self) -> Dict[Tuple[Approach, int], FrozenSet[Movement]]:
        return {
            (approach, i): frozenset(Movement.of(approach, t) for t in allowed)
            for approach in Approach
            for i, allowed in enumerate(self.lane_turns)
        }

    def lanes(self) -> Tuple[Tuple[Approach, int], ...]:
        """Every approach lane, ordered by approach then index."""
        return tuple((a, i) for a in Approach for i in range(self.lanes_per_approach))

    def permits(self, lane: int, movement: Movement) -> bool:
        return 0 <= lane < self.lanes_per_approach and movement.turn in self.lane_turns[lane]

    def lanes_for(self, movement: Movement) -> Tuple[int, ...]:
        return tuple(i for i, allowed in enumerate(self.lane_turns) if movement.turn in allowed)


@dataclass(slots=True)
class VehicleState:
    """Kinematic and bookkeeping record of one vehicle.

    ``wait_steps`` counts the simulation steps spent stationary inside the
    control zone; ``wait_clock`` is that count times the step length, which
    keeps the clock an exact multiple of ``dt``.
    """

    id: int
    kind: Kind
    movement: Movement
    lane: int
    pos: float = 0.0
    speed: float = 0.0
    accel: float = 0.0
    wait_steps: int = 0
    phase: Phase = Phase.APPROACHING
    lc_cooldown: float = 0.0
    dt: float = 0.1
    length: float = 5.0
    in_zone_seen: bool = False

    @property
    def approach(self) -> Approach:
        return self.movement.approach

    @property
    def wait_clock(self) -> float:
        return self.wait_steps * self.dt

    def advance_phase(self, new: Phase) -> None:
        if _PHASE_ORDER[new] < _PHASE_ORDER[self.phase]:
            raise ValueError(f"illegal phase transition {self.phase.value} -> {new.value}")
        self.phase = new


def distance_to_entrance(v: VehicleState, spec: IntersectionSpec) -> float:
    """Distance (m) from the vehicle's front bumper to the entrance line."""
    if v.phase is not Phase.APPROACHING:
        raise ValueError(f"vehicle {v.id} is {v.phase.value}; distance to entrance is undefined")
    return max(spec.entrance_line - v.pos, 0.0)


def in_control_zone(v: VehicleState, spec: IntersectionSpec) -> bool:
    if v.phase is Phase.INSIDE_BOX:
        return True
    if v.phase is Phase.APPROACHING:
        return v.pos >= spec.zone_start
    return False


def lane_turn_table(mapping: Mapping[int, str]) -> Tuple[FrozenSet[Turn], ...]:
    """Build ``lane_turns`` from ``{0: "L", 1: "LC"}`` style strings."""
    return tuple(
        frozenset(Turn(ch) for ch in mapping[i].upper() if ch in "LC") for i in sorted(mapping)
    )
