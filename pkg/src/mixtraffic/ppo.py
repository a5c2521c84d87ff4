"""Proximal policy optimisation for both levels of the RV controller.

Networks are the numpy MLPs of :mod:`mixtraffic.nn`; gradients are derived by
hand, so the loss functions here return gradients alongside their values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .env import AgentConfig, Episode, Scenario, Trajectory
from .nn import MLP, Adam
from .policy import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    DivergenceError,
    PolicyParams,
    log_softmax,
    squashed_gaussian_logp,
)

LEVELS = ("high", "low")
MODES = ("train_high_only", "train_low_only", "train_joint")
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    clip_eps: float = 0.3
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 3e-4
    epochs_per_update: int = 4
    minibatch_size: int = 256
    rollout_len: int = 2000
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    normalize_adv: bool = True
    reward_scale: float = 0.01
    gridlock_penalty: float = 10.0
    hidden: Tuple[int, ...] = (256, 256)
    mode: str = "two_stage"
    updates: int = 20
    stage1_updates: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        for name in ("clip_eps", "lr", "vf_coef", "max_grad_norm", "reward_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs_per_update", "minibatch_size", "rollout_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.ent_coef < 0 or self.gridlock_penalty < 0:
            raise ValueError("ent_coef and gridlock_penalty must be non-negative")
        if self.updates < 0 or self.stage1_updates < 0 or self.checkpoint_every < 0:
            raise ValueError("update counts must be non-negative")
        if self.mode not in ("two_stage", *MODES):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden sizes must be positive")


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: object
    log_prob_old: float
    reward: float
    value_old: float
    done: bool

    def __post_init__(self):
        if not math.isfinite(self.log_prob_old) or not math.isfinite(self.reward):
            raise ValueError("transition log-prob and reward must be finite")


@dataclass(frozen=True)
class AdvantageBatch:
    advantages: np.ndarray
    value_targets: np.ndarray

    def __len__(self) -> int:
        return len(self.advantages)

    def normalized(self) -> "AdvantageBatch":
        a = self.advantages
        if len(a) < 2:
            return self
        return AdvantageBatch((a - a.mean()) / (a.std() + 1e-8), self.value_targets)


def gae(rewards, values, dones, gamma: float = 0.99, lam: float = 0.95, last_value: float = 0.0) -> AdvantageBatch:
    """Generalised advantage estimates for one time-ordered sequence.

    ``last_value`` bootstraps the step after the sequence; it is ignored when
    the final transition is terminal.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if not (len(r) == len(v) == len(d)):
        raise ValueError(f"length mismatch: rewards {len(r)}, values {len(v)}, dones {len(d)}")
    adv = np.zeros(len(r))
    running = 0.0
    next_v = float(last_value)
    for t in range(len(r) - 1, -1, -1):
        nonterminal = 1.0 - d[t]
        delta = r[t] + gamma * next_v * nonterminal - v[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_v = v[t]
    return AdvantageBatch(adv, adv + v)


# -- buffer -----------------------------------------------------------------------


@dataclass
class LevelBatch:
    """Flat training arrays for one level."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def take(self, idx: np.ndarray) -> "LevelBatch":
        return LevelBatch(*(getattr(self, f.name)[idx] for f in fields(self)))

    def transitions(self) -> List[Transition]:
        return [
            Transition(self.obs[k], self.actions[k], float(self.log_probs[k]), float(self.rewards[k]),
                       float(self.values[k]), bool(self.dones[k]))
            for k in range(len(self))
        ]


@dataclass
class RolloutBuffer:
    """Experience of one rollout phase, grouped per level and per agent."""

    trajectories: Dict[str, List[Trajectory]] = field(default_factory=lambda: {"high": [], "low": []})
    env_steps: int = 0
    step_rewards: List[float] = field(default_factory=list)
    waits: List[float] = field(default_factory=list)
    gridlocks: int = 0

    def add(self, level: str, trajs: Iterable[Trajectory]) -> None:
        self.trajectories[level].extend(t for t in trajs if len(t))

    def count(self, level: Optional[str] = None) -> int:
        levels = LEVELS if level is None else (level,)
        return sum(len(t) for lv in levels for t in self.trajectories[lv])

    def __len__(self) -> int:
        return self.count()

    def total_reward(self, level: Optional[str] = None) -> float:
        levels = LEVELS if level is None else (level,)
        return float(sum(sum(t.rewards) for lv in levels for t in self.trajectories[lv]))

    def batch(self, level: str, cfg: TrainConfig) -> Optional[LevelBatch]:
        trajs = self.trajectories[level]
        if not trajs:
            return None
        adv, tgt = [], []
        for t in trajs:
            ab = gae(t.rewards, t.values, t.dones, cfg.gamma, cfg.lam, t.bootstrap)
            adv.append(ab.advantages)
            tgt.append(ab.value_targets)
        cat = lambda xs: np.concatenate([np.asarray(x, dtype=float) for x in xs])
        if level == "high":
            actions = np.concatenate([np.asarray(t.actions, dtype=np.int64) for t in trajs])
        else:
            actions = np.concatenate([np.asarray(t.actions, dtype=float).reshape(-1, 2) for t in trajs])
        return LevelBatch(
            obs=np.concatenate([np.asarray(t.obs, dtype=float) for t in trajs]),
            actions=actions,
            log_probs=cat(t.log_probs for t in trajs),
            values=cat(t.values for t in trajs),
            rewards=cat(t.rewards for t in trajs),
            dones=np.concatenate([np.asarray(t.dones, dtype=bool) for t in trajs]),
            advantages=np.concatenate(adv),
            value_targets=np.concatenate(tgt),
        )


# -- loss ------------------------------------------------------------------------------


@dataclass
class LossDiagnostics:
    loss: float
    policy_loss: float
    vf_loss: float
    entropy: float
    clip_frac: float
    approx_kl: float


def _policy_nets(params: PolicyParams, level: str) -> Tuple[MLP, MLP]:
    if level == "high":
        return params.high, params.value_high
    if level == "low":
        return params.low, params.value_low
    raise ValueError(f"unknown level {level!r}")


def _log_prob_and_grad(level: str, out: np.ndarray, actions: np.ndarray):
    """Log-probabilities of ``actions`` under network output ``out`` plus
    d logp / d out, entropy per row and d entropy / d out."""
    n = len(out)
    if level == "high":
        logp_all = log_softmax(out)
        p = np.exp(logp_all)
        a = actions.astype(np.int64)
        logp = logp_all[np.arange(n), a]
        g_logp = -p
        g_logp[np.arange(n), a] += 1.0
        ent = -(p * logp_all).sum(axis=1)
        g_ent = -p * (logp_all + ent[:, None])
        return logp, g_logp, ent, g_ent
    mean, raw_ls = out[:, :2], out[:, 2:]
    log_std = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    live = ((raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX)).astype(float)
    u = actions
    logp = squashed_gaussian_logp(u, mean, log_std)
    inv_var = np.exp(-2.0 * log_std)
    z2 = (u - mean) ** 2 * inv_var
    g_logp = np.concatenate([(u - mean) * inv_var, (z2 - 1.0) * live], axis=1)
    # entropy of the underlying Gaussian
    ent = (log_std + 0.5 * (1.0 + _LOG_2PI)).sum(axis=1)
    g_ent = np.concatenate([np.zeros_like(mean), live], axis=1)
    return logp, g_logp, ent, g_ent


def ppo_loss(batch: LevelBatch, params: PolicyParams, cfg: TrainConfig, level: str = "high",
             minibatch_index: int = 0, with_grad: bool = True):
    """Clipped surrogate plus value loss for one (mini)batch.

    Returns ``(loss, diagnostics, grads)`` where ``grads`` maps ``"policy"``
    and ``"value"`` to flat gradients (``None`` when ``with_grad`` is false).
    """
    pol, val = _policy_nets(params, level)
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    out, pol_acts = pol.forward(batch.obs)
    logp, g_logp, ent, g_ent = _log_prob_and_grad(level, out, batch.actions)
    ratio = np.exp(logp - batch.log_probs)
    A = batch.advantages
    eps = cfg.clip_eps
    unclipped = ratio * A
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * A
    surrogate = np.minimum(unclipped, clipped)
    policy_loss = -float(surrogate.mean())

    v, val_acts = val.forward(batch.obs)
    v = v[:, 0]
    err = v - batch.value_targets
    vf_loss = float(np.mean(err * err))
    entropy = float(ent.mean())
    loss = policy_loss + cfg.vf_coef * vf_loss - cfg.ent_coef * entropy
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss in minibatch {minibatch_index}")

    log_ratio = logp - batch.log_probs
    diag = LossDiagnostics(
        loss=loss,
        policy_loss=policy_loss,
        vf_loss=vf_loss,
        entropy=entropy,
        clip_frac=float(np.mean(np.abs(ratio - 1.0) > eps)),
        approx_kl=float(np.mean(np.expm1(log_ratio) - log_ratio)),
    )
    if not with_grad:
        return loss, diag, None
    # gradient flows through the unclipped branch wherever it is the minimum
    active = (unclipped <= clipped).astype(float)
    d_logp = -(active * ratio * A) / n
    g_out = d_logp[:, None] * g_logp - (cfg.ent_coef / n) * g_ent
    g_pol = pol.backward(pol_acts, g_out)
    g_val = val.backward(val_acts, (cfg.vf_coef * 2.0 / n) * err[:, None])
    return loss, diag, {"policy": g_pol, "value": g_val}


# -- update ---------------------------------------------------------------------------


def clip_grad_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = math.sqrt(float(g @ g))
    if norm > max_norm:
        return g * (max_norm / (norm + 1e-12))
    return g


class Optimizers:
    """Adam state for the four networks, persistent across updates."""

    def __init__(self, params: PolicyParams, lr: float):
        self.adam = {name: Adam(net.n_params, lr) for name, net in params.nets().items()}


def update(
    buffer: RolloutBuffer,
    params: PolicyParams,
    cfg: TrainConfig,
    levels: Sequence[str] = LEVELS,
    rng: Optional[np.random.Generator] = None,
    optim: Optional[Optimizers] = None,
) -> Tuple[PolicyParams, Dict[str, float]]:
    """Run ``epochs_per_update`` epochs of minibatch PPO on the buffer.

    Returns fresh parameters; the input parameters are left untouched.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    new = params.copy()
    optim = optim or Optimizers(new, cfg.lr)
    stats: Dict[str, List[float]] = {k: [] for k in ("loss", "vf_loss", "clip_frac", "approx_kl", "entropy")}
    mb_index = 0
    for level in levels:
        batch = buffer.batch(level, cfg)
        if batch is None:
            continue
        if cfg.normalize_adv:
            batch.advantages = AdvantageBatch(batch.advantages, batch.value_targets).normalized().advantages
        pol, val = _policy_nets(new, level)
        names = ("high", "value_high") if level == "high" else ("low", "value_low")
        n = len(batch)
        for _ in range(cfg.epochs_per_update):
            order = rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                mb = batch.take(order[start : start + cfg.minibatch_size])
                loss, diag, grads = ppo_loss(mb, new, cfg, level, mb_index)
                mb_index += 1
                # separate networks, separate clipping: a large value error must not
                # shrink the policy step
                g_p = clip_grad_norm(grads["policy"], cfg.max_grad_norm)
                g_v = clip_grad_norm(grads["value"], cfg.max_grad_norm)
                pol.theta = optim.adam[names[0]].step(pol.theta, g_p)
                val.theta = optim.adam[names[1]].step(val.theta, g_v)
                for k in stats:
                    stats[k].append(getattr(diag, k))
    summary = {k: (float(np.mean(v)) if v else float("nan")) for k, v in stats.items()}
    summary["minibatches"] = float(mb_index)
    return new, summary


# -- rollouts -----------------------------------------------------------------------------


def agent_config_for_mode(mode: str) -> AgentConfig:
    if mode == "train_high_only":
        return AgentConfig("policy", "hold", use_filter=False, record_high=True)
    if mode == "train_low_only":
        return AgentConfig("policy", "policy", use_filter=True, record_low=True)
    if mode == "train_joint":
        return AgentConfig("policy", "policy", use_filter=True, record_high=True, record_low=True)
    raise ValueError(f"unknown training mode {mode!r}; choose from {MODES}")


def levels_for_mode(mode: str) -> Tuple[str, ...]:
    return {"train_high_only": ("high",), "train_low_only": ("low",), "train_joint": LEVELS}[mode]


class RolloutCollector:
    """Steps episodes of a scenario and harvests per-RV transitions.

    Episodes persist across calls, so consecutive rollouts continue the same
    traffic; open trajectories are cut and bootstrapped at each boundary.
    Episode ``k`` uses arrival seed ``scenario.seed + k``.
    """

    def __init__(self, scenario: Scenario, mode: str, cfg: TrainConfig, seed: Optional[int] = None):
        self.scenario = scenario
        self.mode = mode
        self.cfg = cfg
        self.agent_cfg = agent_config_for_mode(mode)
        self.seed = scenario.seed if seed is None else seed
        self.episode_index = 0
        self.episode: Optional[Episode] = None

    def _new_episode(self, params: PolicyParams) -> Episode:
        sc = replace(self.scenario, seed=self.seed + self.episode_index)
        self.episode_index += 1
        return Episode(sc, "hierarchical", params, self.agent_cfg, policy_seed=sc.seed + 104729)

    def collect(self, params: PolicyParams, n_steps: Optional[int] = None) -> RolloutBuffer:
        n_steps = self.cfg.rollout_len if n_steps is None else n_steps
        buf = RolloutBuffer()
        if self.scenario.horizon_steps <= 0:
            return buf
        scale = self.cfg.reward_scale
        while buf.env_steps < n_steps:
            if self.episode is None or self.episode.done:
                self.episode = self._new_episode(params)
            ep = self.episode
            ep.agent.params = params
            ep.agent.reward_scale = scale
            m = ep.step()
            buf.env_steps += 1
            buf.step_rewards.append(m.reward)
            if ep.done:
                if ep.gridlock_time is not None:
                    buf.gridlocks += 1
                    ep.agent.terminate_all(ep.state, -self.cfg.gridlock_penalty)
                else:
                    ep.agent.truncate(ep.state)
                ep.finalize()
                buf.waits.extend(ep.new_waits())
            self._harvest(buf)
        if self.episode is not None and not self.episode.done:
            self.episode.agent.truncate(self.episode.state)
            self._harvest(buf)
            buf.waits.extend(self.episode.new_waits())
        return buf

    def _harvest(self, buf: RolloutBuffer) -> None:
        agent = self.episode.agent
        buf.add("high", agent.high_rec.drain())
        buf.add("low", agent.low_rec.drain())


def collect_rollout(scenario: Scenario, params: PolicyParams, cfg: TrainConfig, mode: str,
                    n_steps: Optional[int] = None) -> RolloutBuffer:
    """One-shot rollout from a fresh episode of ``scenario``."""
    return RolloutCollector(scenario, mode, cfg).collect(params, n_steps)


# -- training loop ---------------------------------------------------------------------------


TRAINING_COLUMNS = ("update_idx", "mean_reward", "mean_wait", "clip_frac", "approx_kl", "loss", "vf_loss")


@dataclass
class UpdateRecord:
    update_idx: int
    mean_reward: float
    mean_wait: float
    clip_frac: float
    approx_kl: float
    loss: float
    vf_loss: float
    stage: str = ""

    def row(self) -> Tuple:
        return tuple(getattr(self, c) for c in TRAINING_COLUMNS)


def train_loop(
    collect: Callable[[PolicyParams], RolloutBuffer],
    params: PolicyParams,
    cfg: TrainConfig,
    levels: Sequence[str],
    n_updates: int,
    seed: int = 0,
    start_idx: int = 0,
    stage: str = "",
    on_update: Optional[Callable[[UpdateRecord, PolicyParams], None]] = None,
) -> Tuple[PolicyParams, List[UpdateRecord]]:
    """Alternate rollout collection and PPO updates ``n_updates`` times."""
    rng = np.random.default_rng([seed, 2718])
    optim = Optimizers(params, cfg.lr)
    log: List[UpdateRecord] = []
    for k in range(n_updates):
        buf = collect(params)
        if buf.count() == 0:
            stats = {key: float("nan") for key in ("loss", "vf_loss", "clip_frac", "approx_kl")}
        else:
            params, stats = update(buf, params, cfg, levels, rng, optim)
        params.lineage.append(f"{stage or 'update'}:{start_idx + k}")
        rec = UpdateRecord(
            update_idx=start_idx + k,
            mean_reward=float(np.mean(buf.step_rewards)) if buf.step_rewards else float("nan"),
            mean_wait=float(np.mean(buf.waits)) if buf.waits else float("nan"),
            clip_frac=stats["clip_frac"],
            approx_kl=stats["approx_kl"],
            loss=stats["loss"],
            vf_loss=stats["vf_loss"],
            stage=stage,
        )
        log.append(rec)
        if on_update is not None:
            on_update(rec, params)
    return params, log


def train(
    scenario: Scenario,
    cfg: TrainConfig,
    params: Optional[PolicyParams] = None,
    seed: Optional[int] = None,
    on_update: Optional[Callable[[UpdateRecord, PolicyParams], None]] = None,
) -> Tuple[PolicyParams, List[UpdateRecord]]:
    """Train per ``cfg.mode``.

    ``two_stage`` runs ``stage1_updates`` high-level-only updates (low level
    holding at the entrance), then the remaining ``updates - stage1_updates``
    low-level updates with the high level frozen.
    """
    from .observe import obs_sizes

    seed = scenario.seed if seed is None else seed
    if params is None:
        hi, lo = obs_sizes(scenario.n_cells)
        params = PolicyParams.init(hi, lo, cfg.hidden, seed)
    stages: List[Tuple[str, int]]
    if cfg.mode == "two_stage":
        first = min(cfg.stage1_updates, cfg.updates)
        stages = [("train_high_only", first), ("train_low_only", cfg.updates - first)]
    else:
        stages = [(cfg.mode, cfg.updates)]
    records: List[UpdateRecord] = []
    for k, (mode, n) in enumerate(stages):
        if n == 0:
            continue
        collector = RolloutCollector(scenario, mode, cfg, seed=seed + 1000 * k)
        params, log = train_loop(collector.collect, params, cfg, levels_for_mode(mode), n,
                                 seed=seed + k, start_idx=len(records), stage=mode, on_update=on_update)
        records.extend(log)
    return params, records
