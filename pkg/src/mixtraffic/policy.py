"""The hierarchical RV controller: Go/Stop head, continuous head, speed-band filter."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import IntersectionSpec, Kind, Phase, VehicleState
from .microsim import LaneChange, RvCommand, SimParams
from .nn import MLP

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LC_THRESHOLD = 0.33
BOUNDARY_EPS = 1e-9  # metres
CHECKPOINT_FORMAT = "mixtraffic-checkpoint/1"
_LOG_2PI = math.log(2.0 * math.pi)


class Decision(IntEnum):
    GO = 0
    STOP = 1


class DivergenceError(FloatingPointError):
    """Network produced non-finite outputs."""


@dataclass(frozen=True)
class RawLowAction:
    acc: float
    lc: float


# -- parameters ---------------------------------------------------------------


@dataclass
class PolicyParams:
    high: MLP
    low: MLP
    value_high: MLP
    value_low: MLP
    seed: Optional[int] = None
    lineage: List[str] = field(default_factory=list)

    @classmethod
    def init(
        cls, high_dim: int, low_dim: int, hidden: Sequence[int] = (256, 256), seed: int = 0
    ) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        hidden = tuple(hidden)
        return cls(
            high=MLP((high_dim, *hidden, 2), rng, out_gain=0.01),
            low=MLP((low_dim, *hidden, 4), rng, out_gain=0.01),
            value_high=MLP((high_dim, *hidden, 1), rng, out_gain=1.0),
            value_low=MLP((low_dim, *hidden, 1), rng, out_gain=1.0),
            seed=seed,
            lineage=[f"init:{seed}"],
        )

    def nets(self) -> Dict[str, MLP]:
        return {"high": self.high, "low": self.low, "value_high": self.value_high, "value_low": self.value_low}

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.high.copy(), self.low.copy(), self.value_high.copy(), self.value_low.copy(),
            self.seed, list(self.lineage),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, net in self.nets().items():
            h.update(name.encode())
            h.update(np.asarray(net.sizes, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(net.theta, dtype=np.float64).tobytes())
        return h.hexdigest()


def save_checkpoint(path, params: PolicyParams, config_hash: str = "", extra: Optional[dict] = None) -> Path:
    """Write an ``.npz`` checkpoint (layout documented in the README)."""
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "seed": params.seed,
        "lineage": params.lineage,
        "digest": params.digest(),
    }
    if extra:
        meta.update(extra)
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, net in params.nets().items():
        arrays[f"{name}.sizes"] = np.asarray(net.sizes, dtype=np.int64)
        arrays[f"{name}.theta"] = np.asarray(net.theta, dtype=np.float64)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Tuple[PolicyParams, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        nets = {}
        for name in ("high", "low", "value_high", "value_low"):
            net = MLP(tuple(int(s) for s in data[f"{name}.sizes"]))
            net.theta = np.array(data[f"{name}.theta"], dtype=np.float64)
            nets[name] = net
    params = PolicyParams(seed=meta.get("seed"), lineage=list(meta.get("lineage", [])), **nets)
    if params.digest() != meta.get("digest"):
        raise ValueError(f"{path}: checkpoint digest mismatch")
    return params, meta


# -- distributions -------------------------------------------------------------


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite {what}")
    return x


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def categorical_sample(logits: np.ndarray, rng: np.random.Generator, deterministic: bool = False):
    """Sample one index per row. Returns (actions, log_probs)."""
    logits = _finite(np.atleast_2d(logits), "logits")
    logp = log_softmax(logits)
    if deterministic:
        actions = logp.argmax(axis=-1)
    else:
        cdf = np.cumsum(np.exp(logp), axis=-1)
        u = rng.random(len(logits))[:, None]
        actions = np.minimum((u > cdf).sum(axis=-1), logits.shape[-1] - 1)
    return actions, logp[np.arange(len(actions)), actions]


def log1m_tanh2(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (math.log(2.0) - np.abs(u) - np.log1p(np.exp(-2.0 * np.abs(u))))


def squashed_gaussian_logp(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log density of tanh(u) where u ~ N(mean, exp(log_std)^2), summed over the last axis."""
    z = (u - mean) * np.exp(-log_std)
    gauss = -0.5 * z * z - log_std - 0.5 * _LOG_2PI
    return (gauss - log1m_tanh2(u)).sum(axis=-1)


def split_low_output(out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return out[..., :2], np.clip(out[..., 2:], LOG_STD_MIN, LOG_STD_MAX)


# -- acting --------------------------------------------------------------------


def high_level_act(obs: np.ndarray, params: PolicyParams, rng: np.random.Generator, deterministic: bool = False):
    """Returns (decisions, log_probs) for a batch (or a single) observation."""
    single = np.ndim(obs) == 1
    actions, logp = categorical_sample(params.high(np.atleast_2d(obs)), rng, deterministic)
    decisions = [Decision(int(a)) for a in actions]
    if single:
        return decisions[0], float(logp[0])
    return decisions, logp


def low_level_act(obs: np.ndarray, params: PolicyParams, rng: np.random.Generator, deterministic: bool = False):
    """Returns (raw actions, pre-squash samples, log_probs).

    The pre-squash sample ``u`` is what training stores: ``tanh`` is not
    safely invertible at the action bounds.
    """
    single = np.ndim(obs) == 1
    out = _finite(params.low(np.atleast_2d(obs)), "low-level outputs")
    mean, log_std = split_low_output(out)
    if deterministic:
        u = mean.copy()
    else:
        u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    logp = squashed_gaussian_logp(u, mean, log_std)
    a = np.tanh(u)
    raws = [RawLowAction(float(r[0]), float(r[1])) for r in a]
    if single:
        return raws[0], u[0], float(logp[0])
    return raws, u, logp


def decode_lane_change(lc: float) -> LaneChange:
    if not -1.0 <= lc <= 1.0 or math.isnan(lc):
        raise ValueError(f"lane-change output {lc!r} outside [-1, 1]")
    if lc < -LC_THRESHOLD:
        return LaneChange.LEFT
    if lc > LC_THRESHOLD:
        return LaneChange.RIGHT
    return LaneChange.KEEP


def compose(decision: Decision, raw: RawLowAction, v: VehicleState, sim: SimParams = SimParams()) -> RvCommand:
    """Combine the Go/Stop advice with the continuous action (before filtering)."""
    if v.kind is not Kind.RV or v.phase is not Phase.APPROACHING:
        raise ValueError("compose needs an approaching RV")
    if decision is Decision.GO:
        return RvCommand(sim.a_max_rv, LaneChange.KEEP)
    lo, hi = -sim.idm.b_comf, sim.a_max_rv
    accel = lo + (raw.acc + 1.0) * 0.5 * (hi - lo)
    return RvCommand(accel, decode_lane_change(raw.lc))


# -- safety bands ----------------------------------------------------------------


@dataclass(frozen=True)
class SafetyBands:
    """Distance-dependent speed limits ``(d_low, d_high, v_limit)``; the innermost band covers d <= d_high."""

    bands: Tuple[Tuple[float, float, float], ...] = ((20.0, 30.0, 3.0), (10.0, 20.0, 2.0), (5.0, 10.0, 1.0), (0.0, 5.0, 0.0))

    def __post_init__(self):
        ordered = sorted(self.bands, key=lambda b: -b[1])
        object.__setattr__(self, "bands", tuple(tuple(float(x) for x in b) for b in ordered))
        prev_low = prev_limit = None
        for lo, hi, lim in self.bands:
            if not lo < hi or lim < 0:
                raise ValueError(f"malformed band {(lo, hi, lim)}")
            if prev_low is not None and hi != prev_low:
                raise ValueError("bands must be contiguous and disjoint")
            if prev_limit is not None and lim > prev_limit:
                raise ValueError("limits must not increase toward the entrance")
            prev_low, prev_limit = lo, lim
        if self.bands and self.bands[-1][0] != 0.0:
            raise ValueError("the innermost band must reach the entrance line")

    @property
    def outer(self) -> float:
        return self.bands[0][1] if self.bands else 0.0

    def limit(self, d: float) -> float:
        """Speed limit at distance ``d`` from the entrance (inf outside the bands)."""
        for lo, hi, lim in self.bands:
            if lo < d <= hi:
                return lim
        if self.bands and d <= self.bands[-1][0]:
            return self.bands[-1][2]
        return math.inf

    def envelope(self, d: float, b: float) -> float:
        """Highest speed at ``d`` from which braking at ``b`` meets every band ahead in time."""
        best = self.limit(d)
        for _, hi, lim in self.bands:
            if d > hi:
                best = min(best, math.sqrt(lim * lim + 2.0 * b * (d - hi)))
        return best

    def next_speed_cap(self, d: float, b: float, dt: float) -> float:
        """Largest post-step speed v' with v' <= envelope(d - v' dt) under semi-implicit integration."""
        cap = math.inf
        for _, hi, lim in self.bands:
            if d - lim * dt <= hi + BOUNDARY_EPS:
                cap = min(cap, lim)
            else:
                # positive root of v'^2 + 2 b dt v' = lim^2 + 2 b (d - hi), cancellation-free
                bdt = b * dt
                rhs = lim * lim + 2.0 * b * (d - hi)
                root = rhs / (bdt + math.sqrt(bdt * bdt + rhs))
                # never let position round-off carry us across the boundary above the limit
                cap = min(cap, root, max(lim, (d - hi - BOUNDARY_EPS) / dt))
        return cap


def safety_filter(
    cmd: RvCommand,
    v: VehicleState,
    bands: SafetyBands,
    decision: Decision,
    dt: float,
    spec: IntersectionSpec,
    sim: SimParams = SimParams(),
) -> RvCommand:
    """Automatic braking for Stop-advised RVs approaching the entrance.

    The cap on the post-step speed looks ahead over the bands still to come,
    so a vehicle that starts inside the braking envelope reaches every band
    boundary at or below that band's limit and comes to rest before the
    innermost band. Go-advised RVs pass through untouched.
    """
    if decision is Decision.GO:
        return cmd
    d = spec.entrance_line - v.pos
    cap = bands.next_speed_cap(d, sim.idm.b_comf, dt)
    if v.speed + cmd.accel * dt <= cap:
        return cmd
    accel = max((cap - v.speed) / dt, -sim.b_emergency)
    return RvCommand(min(accel, cmd.accel), cmd.lane_change)
