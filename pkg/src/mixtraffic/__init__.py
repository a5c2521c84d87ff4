"""Mixed robot/human traffic at an unsignalised four-way intersection."""

from .core import CONFLICT_FREE, MOVEMENTS, IntersectionSpec, Movement, VehicleState, conflicts
from .env import Episode, Scenario
from .microsim import IdmParams, SimParams, SimState, step
from .policy import Decision, PolicyParams, SafetyBands

__version__ = "0.1.0"

__all__ = [
    "CONFLICT_FREE",
    "MOVEMENTS",
    "Decision",
    "Episode",
    "IdmParams",
    "IntersectionSpec",
    "Movement",
    "PolicyParams",
    "SafetyBands",
    "Scenario",
    "SimParams",
    "SimState",
    "VehicleState",
    "conflicts",
    "step",
]
