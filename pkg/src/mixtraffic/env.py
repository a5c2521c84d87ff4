"""Episode runner: couples the simulator with a controller and records metrics.

Also hosts :class:`HierarchicalAgent`, the per-step driver of the two-level
RV controller, which can record PPO transitions for either level while it
acts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Set

import numpy as np

from .baselines import HlOnlyConfig, SignalPlan, stop_at_line_accel, tl_control
from .core import MOVEMENTS, IntersectionSpec, Kind, Movement, Phase
from .microsim import (
    RvCommand,
    SimParams,
    SimState,
    SpawnProcess,
    finalize,
    is_committed,
    spawn,
    step,
)
from .observe import ObservationBuilder, average_queue, obs_sizes, step_reward, unregulated_ratio
from .policy import (
    Decision,
    PolicyParams,
    RawLowAction,
    SafetyBands,
    compose,
    high_level_act,
    low_level_act,
    safety_filter,
)

CONTROLLERS = ("hierarchical", "hl_only", "tl", "random", "none")


@dataclass
class Scenario:
    """Everything needed to build one simulation run."""

    spec: IntersectionSpec = field(default_factory=IntersectionSpec)
    sim: SimParams = field(default_factory=SimParams)
    demand: Mapping[Movement, float] = field(default_factory=lambda: {m: 300.0 for m in MOVEMENTS})
    rv_penetration: float = 0.5
    horizon: float = 600.0
    seed: int = 0
    bands: SafetyBands = field(default_factory=SafetyBands)
    signal: SignalPlan = field(default_factory=SignalPlan.default)
    hl_only: HlOnlyConfig = field(default_factory=HlOnlyConfig)
    hl_period: float = 1.0
    n_cells: int = 10
    w_max: float = 120.0
    gridlock_timeout: float = 120.0

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon / self.sim.dt))

    @property
    def hl_period_steps(self) -> int:
        return max(1, int(round(self.hl_period / self.sim.dt)))

    def new_state(self) -> SimState:
        return SimState(self.spec, self.sim)

    def new_spawner(self, seed: Optional[int] = None) -> SpawnProcess:
        return SpawnProcess(dict(self.demand), self.rv_penetration, self.seed if seed is None else seed)


# -- transition recording ---------------------------------------------------------


@dataclass
class OpenTransition:
    obs: np.ndarray
    action: object
    log_prob: float
    value: float
    reward: float = 0.0
    step: int = 0
    end_step: int = -1


@dataclass
class Trajectory:
    """One agent's consecutive decisions at one level."""

    vid: int
    obs: List[np.ndarray] = field(default_factory=list)
    actions: List[object] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    dones: List[bool] = field(default_factory=list)
    steps: List[int] = field(default_factory=list)
    end_steps: List[int] = field(default_factory=list)
    bootstrap: float = 0.0

    def __len__(self) -> int:
        return len(self.rewards)


class LevelRecorder:
    """Tracks open transitions of every agent at one level of the hierarchy."""

    def __init__(self):
        self.now = 0
        self.open: Dict[int, OpenTransition] = {}
        self.current: Dict[int, Trajectory] = {}
        self.finished: List[Trajectory] = []

    def decide(self, vid: int, tr: OpenTransition) -> None:
        self._close(vid, done=False)
        self.open[vid] = tr

    def add_reward(self, r: float) -> None:
        for tr in self.open.values():
            tr.reward += r

    def _close(self, vid: int, done: bool) -> None:
        tr = self.open.pop(vid, None)
        if tr is None:
            return
        traj = self.current.setdefault(vid, Trajectory(vid))
        traj.obs.append(tr.obs)
        traj.actions.append(tr.action)
        traj.log_probs.append(tr.log_prob)
        traj.values.append(tr.value)
        traj.rewards.append(tr.reward)
        traj.dones.append(done)
        traj.steps.append(tr.step)
        traj.end_steps.append(self.now)
        if done:
            self.finished.append(self.current.pop(vid))

    def terminate(self, vid: int, penalty: float = 0.0) -> None:
        if vid in self.open:
            self.open[vid].reward += penalty
            self._close(vid, done=True)
        elif vid in self.current:
            traj = self.current.pop(vid)
            traj.dones[-1] = True
            traj.rewards[-1] += penalty
            self.finished.append(traj)

    def truncate(self, bootstrap: Mapping[int, float]) -> None:
        """Close everything without terminal flags; values bootstrap the tails."""
        for vid in list(self.open):
            self._close(vid, done=False)
        for vid, traj in self.current.items():
            traj.bootstrap = float(bootstrap.get(vid, 0.0))
            self.finished.append(traj)
        self.current = {}

    def drain(self) -> List[Trajectory]:
        out, self.finished = self.finished, []
        return out

    def active(self) -> Set[int]:
        return set(self.open) | set(self.current)


# -- agent ----------------------------------------------------------------------------


@dataclass
class AgentConfig:
    """How each level of the RV controller is driven.

    high: ``policy`` | ``random`` | ``go``
    low:  ``policy`` | ``random`` | ``hold`` (brake to the line, the Go/Stop-only baseline)
    """

    high: str = "policy"
    low: str = "policy"
    use_filter: bool = True
    deterministic: bool = False
    record_high: bool = False
    record_low: bool = False

    def __post_init__(self):
        if self.high not in ("policy", "random", "go"):
            raise ValueError(f"unknown high-level source {self.high!r}")
        if self.low not in ("policy", "random", "hold"):
            raise ValueError(f"unknown low-level source {self.low!r}")


def agent_config_for(controller: str, deterministic: bool = False) -> AgentConfig:
    if controller == "hierarchical":
        return AgentConfig("policy", "policy", True, deterministic)
    if controller == "hl_only":
        return AgentConfig("policy", "hold", False, deterministic)
    if controller == "random":
        return AgentConfig("policy", "policy", True, False)
    raise ValueError(f"controller {controller!r} does not drive RVs")


class HierarchicalAgent:
    """Drives every RV inside the control zone.

    The Go/Stop decision of each RV is refreshed every ``hl_period`` steps
    (and immediately when an RV enters the zone) and latched in between.
    Stop-advised RVs get a continuous action every step. RVs outside the
    zone are left to car following.
    """

    def __init__(
        self,
        scenario: Scenario,
        params: Optional[PolicyParams],
        cfg: AgentConfig,
        rng: np.random.Generator,
        builder: Optional[ObservationBuilder] = None,
    ):
        self.scenario = scenario
        self.params = params
        self.cfg = cfg
        self.rng = rng
        self.builder = builder or ObservationBuilder(scenario.n_cells, scenario.w_max)
        self.decisions: Dict[int, Decision] = {}
        self.high_rec = LevelRecorder()
        self.low_rec = LevelRecorder()
        self.controlled: Set[int] = set()
        # Stop-advised RVs do not request entry; the episode holds them at the line
        self.yielding: Set[int] = set()
        self.reward_scale = 1.0
        if params is None and ("policy" in (cfg.high, cfg.low)):
            raise ValueError("a policy-driven controller needs PolicyParams")

    # RVs inside the control zone and still approaching
    def _zone_rvs(self, state: SimState) -> List[int]:
        start = state.spec.zone_start
        return [
            v.id
            for v in state.vehicles.values()
            if v.kind is Kind.RV and v.phase is Phase.APPROACHING and v.pos >= start
        ]

    def _retire(self, state: SimState, still: Set[int]) -> None:
        for vid in self.controlled - still:
            self.decisions.pop(vid, None)
            if self.cfg.record_high:
                self.high_rec.terminate(vid)
            if self.cfg.record_low:
                self.low_rec.terminate(vid)
        self.controlled = still

    def act(self, state: SimState) -> Dict[int, RvCommand]:
        sc = self.scenario
        self.high_rec.now = self.low_rec.now = state.step_index
        zone = self._zone_rvs(state)
        self._retire(state, set(zone))
        self.yielding = set()
        if not zone:
            return {}
        due = state.step_index % sc.hl_period_steps == 0
        need = [vid for vid in zone if due or vid not in self.decisions]
        if need:
            self._decide_high(state, need)

        commands: Dict[int, RvCommand] = {}
        stoppers = []
        for vid in zone:
            v = state.vehicles[vid]
            decision = self.decisions[vid]
            if decision is Decision.STOP and is_committed(v, state.spec, state.params):
                decision = Decision.GO
            if decision is Decision.GO:
                commands[vid] = RvCommand(state.params.a_max_rv)
            else:
                stoppers.append(vid)
        self.yielding = set(stoppers)
        if stoppers:
            commands.update(self._act_low(state, stoppers))
        return commands

    def _decide_high(self, state: SimState, vids: List[int]) -> None:
        cfg = self.cfg
        if cfg.high == "go":
            for vid in vids:
                self.decisions[vid] = Decision.GO
            return
        if cfg.high == "random":
            for vid, u in zip(vids, self.rng.random(len(vids))):
                self.decisions[vid] = Decision.GO if u < 0.5 else Decision.STOP
            return
        obs = np.stack([self.builder.high_level(state, vid) for vid in vids])
        decisions, logp = high_level_act(obs, self.params, self.rng, cfg.deterministic)
        if cfg.record_high:
            values = self.params.value_high(obs)[:, 0]
        for k, vid in enumerate(vids):
            self.decisions[vid] = decisions[k]
            if cfg.record_high:
                self.high_rec.decide(
                    vid, OpenTransition(obs[k], int(decisions[k]), float(logp[k]), float(values[k]), step=state.step_index)
                )
                state.log("hl_decision", state.vehicles[vid], decisions[k].name)

    def _act_low(self, state: SimState, vids: List[int]) -> Dict[int, RvCommand]:
        cfg, sc = self.cfg, self.scenario
        out: Dict[int, RvCommand] = {}
        if cfg.low == "hold":
            for vid in vids:
                v = state.vehicles[vid]
                out[vid] = RvCommand(stop_at_line_accel(v, state, sc.hl_only.stop_decel))
            return out
        if cfg.low == "random":
            raws = [RawLowAction(float(a), float(b)) for a, b in self.rng.uniform(-1.0, 1.0, size=(len(vids), 2))]
        else:
            obs = np.stack([self.builder.low_level(state, vid).vector() for vid in vids])
            raws, u, logp = low_level_act(obs, self.params, self.rng, cfg.deterministic)
            if cfg.record_low:
                values = self.params.value_low(obs)[:, 0]
                for k, vid in enumerate(vids):
                    self.low_rec.decide(
                        vid, OpenTransition(obs[k], u[k].copy(), float(logp[k]), float(values[k]), step=state.step_index)
                    )
                    state.log("ll_decision", state.vehicles[vid])
        for vid, raw in zip(vids, raws):
            v = state.vehicles[vid]
            cmd = compose(Decision.STOP, raw, v, state.params)
            if cfg.use_filter:
                cmd = safety_filter(cmd, v, sc.bands, Decision.STOP, state.params.dt, state.spec, state.params)
            out[vid] = cmd
        return out

    def add_reward(self, r: float) -> None:
        r *= self.reward_scale
        if self.cfg.record_high:
            self.high_rec.add_reward(r)
        if self.cfg.record_low:
            self.low_rec.add_reward(r)

    def terminate_all(self, state: SimState, penalty: float) -> None:
        self.high_rec.now = self.low_rec.now = state.step_index
        for rec, on in ((self.high_rec, self.cfg.record_high), (self.low_rec, self.cfg.record_low)):
            if on:
                for vid in list(rec.active()):
                    rec.terminate(vid, penalty)
        self.controlled = set()
        self.decisions = {}

    def truncate(self, state: SimState) -> None:
        """Close open trajectories at a rollout boundary, bootstrapping from current values."""
        self.high_rec.now = self.low_rec.now = state.step_index
        zone = [vid for vid in self._zone_rvs(state) if vid in self.controlled]
        if self.cfg.record_high:
            boot = {}
            live = [vid for vid in zone if vid in self.high_rec.active()]
            if live:
                obs = np.stack([self.builder.high_level(state, vid) for vid in live])
                boot = dict(zip(live, self.params.value_high(obs)[:, 0]))
            self.high_rec.truncate(boot)
        if self.cfg.record_low:
            boot = {}
            live = [vid for vid in zone if vid in self.low_rec.active()]
            if live:
                obs = np.stack([self.builder.low_level(state, vid).vector() for vid in live])
                boot = dict(zip(live, self.params.value_low(obs)[:, 0]))
            self.low_rec.truncate(boot)


# -- episodes ------------------------------------------------------------------------


@dataclass
class StepMetrics:
    time: float
    reward: float
    avg_queue: float
    unregulated_ratio: float


class Episode:
    """One seeded run of a scenario under a controller."""

    def __init__(
        self,
        scenario: Scenario,
        controller: str = "none",
        params: Optional[PolicyParams] = None,
        agent_cfg: Optional[AgentConfig] = None,
        policy_seed: Optional[int] = None,
        deterministic: bool = False,
    ):
        if controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {controller!r}; choose from {CONTROLLERS}")
        self.scenario = scenario
        self.controller = controller
        self.state = scenario.new_state()
        self.spawner = scenario.new_spawner()
        self.builder = ObservationBuilder(scenario.n_cells, scenario.w_max)
        self.metrics: List[StepMetrics] = []
        self.gridlock_time: Optional[float] = None
        self.done = False
        self.finalized = False
        self.wait_cursor = 0
        seed = scenario.seed if policy_seed is None else policy_seed
        # policy randomness is independent of the arrival stream
        self.rng = np.random.default_rng([seed, 7919])
        self.agent: Optional[HierarchicalAgent] = None
        if controller == "random" and params is None:
            # the untrained controller: freshly initialised networks
            hi, lo = obs_sizes(scenario.n_cells)
            params = PolicyParams.init(hi, lo, seed=seed)
        if controller in ("hierarchical", "hl_only", "random"):
            cfg = agent_cfg or agent_config_for(controller, deterministic)
            self.agent = HierarchicalAgent(scenario, params, cfg, self.rng, self.builder)
        elif agent_cfg is not None:
            raise ValueError(f"controller {controller!r} takes no agent configuration")

    @property
    def steps_left(self) -> int:
        return self.scenario.horizon_steps - self.state.step_index

    def step(self) -> StepMetrics:
        if self.done:
            raise RuntimeError("episode is over")
        st = self.state
        spawn(self.spawner, st)
        commands: Dict[int, RvCommand] = {}
        holds = ()
        if self.agent is not None:
            commands = self.agent.act(st)
            holds = self.agent.yielding
        elif self.controller == "tl":
            holds = tl_control(st, self.scenario.signal)
        step(st, commands, extra_holds=holds)
        r = step_reward(st, self.scenario.w_max)
        if self.agent is not None:
            self.agent.add_reward(r)
        m = StepMetrics(st.time, r, average_queue(st), unregulated_ratio(st))
        self.metrics.append(m)
        idle = (st.step_index - st.last_departure_step) * st.params.dt
        if idle >= self.scenario.gridlock_timeout - 1e-9 and st.vehicles:
            self.gridlock_time = st.time
            st.log("gridlock", None, f"{idle:.1f}")
            self.done = True
        elif self.steps_left <= 0:
            self.done = True
        return m

    def finalize(self) -> None:
        if not self.finalized:
            finalize(self.state)
            self.finalized = True

    def new_waits(self) -> List[float]:
        """Final waits logged since the previous call."""
        log = self.state.event_log
        out = [float(e.detail) for e in log[self.wait_cursor :] if e.event_type in ("depart", "final")]
        self.wait_cursor = len(log)
        return out

    def run(self) -> "Episode":
        while not self.done:
            self.step()
        self.finalize()
        return self
