import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixtraffic.core import MOVEMENTS
from mixtraffic.env import AgentConfig, Episode, Scenario, Trajectory
from mixtraffic.nn import MLP
from mixtraffic.observe import obs_sizes
from mixtraffic.policy import DivergenceError, PolicyParams, high_level_act, log_softmax
from mixtraffic.ppo import (
    AdvantageBatch,
    LevelBatch,
    RolloutBuffer,
    TrainConfig,
    Transition,
    collect_rollout,
    gae,
    ppo_loss,
    train,
    train_loop,
    update,
)


def brute_gae(r, v, d, gamma, lam, last=0.0):
    """Direct double sum of discounted TD residuals, cut at terminals."""
    n = len(r)
    nxt = [v[t + 1] if t + 1 < n else last for t in range(n)]
    delta = [r[t] + gamma * nxt[t] * (1 - d[t]) - v[t] for t in range(n)]
    out = []
    for t in range(n):
        acc, w = 0.0, 1.0
        for k in range(t, n):
            acc += w * delta[k]
            if d[k]:
                break
            w *= gamma * lam
        out.append(acc)
    return np.array(out)


def test_gae_matches_brute_force(rng):
    for _ in range(200):
        n = int(rng.integers(1, 17))
        r, v = rng.standard_normal(n), rng.standard_normal(n)
        d = rng.random(n) < 0.2
        last = float(rng.standard_normal())
        got = gae(r, v, d, 0.97, 0.9, last)
        assert np.max(np.abs(got.advantages - brute_gae(r, v, d, 0.97, 0.9, last))) < 1e-10
        assert np.allclose(got.value_targets, got.advantages + v)


def test_gae_hand_example():
    # single terminal step: A = r - V
    ab = gae([1.0], [0.25], [True], last_value=100.0)
    assert ab.advantages[0] == pytest.approx(0.75)
    # two steps, lam = 1: Monte Carlo return minus value
    ab = gae([1.0, 2.0], [0.0, 0.0], [False, True], gamma=0.5, lam=1.0)
    assert list(ab.advantages) == pytest.approx([2.0, 2.0])


def test_gae_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        gae([1.0, 2.0], [0.0], [False, False])


def test_normalized_advantages():
    ab = AdvantageBatch(np.array([1.0, 2.0, 3.0]), np.zeros(3)).normalized()
    assert ab.advantages.mean() == pytest.approx(0.0, abs=1e-12)
    assert ab.advantages.std() == pytest.approx(1.0, abs=1e-6)
    single = AdvantageBatch(np.array([5.0]), np.zeros(1))
    assert single.normalized() is single


def test_transition_validation():
    with pytest.raises(ValueError):
        Transition(np.zeros(2), 0, float("nan"), 0.0, 0.0, False)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(mode="joint")
    with pytest.raises(ValueError):
        TrainConfig(minibatch_size=0)


# -- loss --------------------------------------------------------------------------


def _batch(params, level, n, rng, actions=None):
    dim = params.high.sizes[0] if level == "high" else params.low.sizes[0]
    obs = rng.standard_normal((n, dim))
    if level == "high":
        logp_all = log_softmax(params.high(obs))
        a = rng.integers(0, 2, n) if actions is None else actions
        logp = logp_all[np.arange(n), a]
    else:
        from mixtraffic.policy import split_low_output, squashed_gaussian_logp

        mean, ls = split_low_output(params.low(obs))
        a = mean + np.exp(ls) * rng.standard_normal(mean.shape)
        logp = squashed_gaussian_logp(a, mean, ls)
    adv = rng.standard_normal(n)
    vals = rng.standard_normal(n)
    return LevelBatch(obs, a, logp, vals, np.zeros(n), np.zeros(n, bool), adv, rng.standard_normal(n))


@pytest.mark.parametrize("level", ["high", "low"])
def test_policy_loss_at_old_params_is_minus_mean_advantage(level, rng):
    p = PolicyParams.init(6, 8, (8,), seed=1)
    b = _batch(p, level, 32, rng)
    cfg = TrainConfig(vf_coef=1.0)
    _, diag, _ = ppo_loss(b, p, cfg, level, with_grad=False)
    assert abs(diag.policy_loss + b.advantages.mean()) < 1e-9
    assert diag.clip_frac == 0.0
    assert abs(diag.approx_kl) < 1e-12


def test_value_loss_zero_when_targets_match(rng):
    p = PolicyParams.init(6, 8, (8,), seed=1)
    b = _batch(p, "high", 16, rng)
    b.value_targets = p.value_high(b.obs)[:, 0].copy()
    _, diag, _ = ppo_loss(b, p, TrainConfig(), "high", with_grad=False)
    assert diag.vf_loss == 0.0


@pytest.mark.parametrize("level", ["high", "low"])
def test_ppo_gradient_matches_finite_differences(level, rng):
    # 4-8-2 policy (4-8-4 for the Gaussian head), perturbed away from the old params
    p = PolicyParams.init(4, 4, (8,), seed=2)
    b = _batch(p, level, 24, rng)
    net = p.high if level == "high" else p.low
    net.theta = net.theta + 0.3 * rng.standard_normal(net.n_params)
    cfg = TrainConfig(clip_eps=0.2, ent_coef=0.01, vf_coef=0.5)
    _, _, grads = ppo_loss(b, p, cfg, level)
    for name, g in (("policy", grads["policy"]), ("value", grads["value"])):
        tgt = net if name == "policy" else (p.value_high if level == "high" else p.value_low)
        base = tgt.theta.copy()
        h = 1e-6
        for k in rng.choice(len(base), size=20, replace=False):
            e = np.zeros_like(base)
            e[k] = h
            tgt.theta = base + e
            up = ppo_loss(b, p, cfg, level, with_grad=False)[0]
            tgt.theta = base - e
            dn = ppo_loss(b, p, cfg, level, with_grad=False)[0]
            tgt.theta = base
            num = (up - dn) / (2 * h)
            assert abs(num - g[k]) <= 1e-4 * max(1.0, abs(num), abs(g[k]))


def test_nonfinite_loss_names_minibatch(rng):
    p = PolicyParams.init(4, 4, (8,), seed=0)
    b = _batch(p, "high", 8, rng)
    b.value_targets[0] = np.inf
    with pytest.raises(DivergenceError, match="minibatch 3"):
        ppo_loss(b, p, TrainConfig(), "high", minibatch_index=3)


def test_update_returns_new_params_and_leaves_input(rng):
    p = PolicyParams.init(4, 4, (8,), seed=0)
    before = p.digest()
    buf = RolloutBuffer()
    t = Trajectory(1, obs=list(rng.standard_normal((10, 4))), actions=[0] * 10, log_probs=[-0.69] * 10,
                   values=[0.0] * 10, rewards=list(rng.standard_normal(10)), dones=[False] * 9 + [True])
    buf.add("high", [t])
    new, summary = update(buf, p, TrainConfig(minibatch_size=4), ("high",), np.random.default_rng(0))
    assert p.digest() == before
    assert new.digest() != before
    assert summary["minibatches"] == 4 * 3
    # the low-level networks were not touched
    assert np.array_equal(new.low.theta, p.low.theta)


# -- rollouts -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_scenario():
    return Scenario(rv_penetration=1.0, horizon=60.0, seed=3, demand={m: 500.0 for m in MOVEMENTS})


@pytest.fixture(scope="module")
def small_params():
    hi, lo = obs_sizes()
    return PolicyParams.init(hi, lo, (16, 16), seed=0)


def test_rollout_transition_count_matches_event_log(small_scenario, small_params):
    cfg = TrainConfig(hidden=(16, 16), rollout_len=300)
    from mixtraffic.ppo import RolloutCollector

    col = RolloutCollector(small_scenario, "train_joint", cfg)
    buf = col.collect(small_params)
    log = col.episode.state.event_log
    assert buf.env_steps == 300
    assert buf.count("high") == sum(e.event_type == "hl_decision" for e in log)
    assert buf.count("low") == sum(e.event_type == "ll_decision" for e in log)
    assert buf.count("high") > 0 and buf.count("low") > 0


def test_reward_bookkeeping_identity(small_scenario, small_params):
    cfg = AgentConfig("policy", "policy", True, record_high=True, record_low=True)
    ep = Episode(small_scenario, "hierarchical", small_params, cfg)
    agent = ep.agent
    agent.reward_scale = 0.01
    expected = {"high": 0.0, "low": 0.0}
    orig = agent.add_reward

    def spy(r):
        expected["high"] += 0.01 * r * len(agent.high_rec.open)
        expected["low"] += 0.01 * r * len(agent.low_rec.open)
        orig(r)

    agent.add_reward = spy
    for _ in range(400):
        ep.step()
    agent.truncate(ep.state)
    for level, rec in (("high", agent.high_rec), ("low", agent.low_rec)):
        total = sum(sum(t.rewards) for t in rec.drain())
        assert total == pytest.approx(expected[level], rel=1e-9, abs=1e-12)


def test_zero_horizon_rollout_is_empty(small_params):
    sc = Scenario(horizon=0.0)
    buf = collect_rollout(sc, small_params, TrainConfig(hidden=(16, 16)), "train_high_only", 50)
    assert len(buf) == 0 and buf.env_steps == 0


def test_training_is_reproducible(small_scenario):
    cfg = TrainConfig(hidden=(8,), updates=2, stage1_updates=1, rollout_len=150, minibatch_size=64)
    a, log_a = train(small_scenario, cfg, seed=4)
    b, log_b = train(small_scenario, cfg, seed=4)
    assert a.digest() == b.digest()
    assert repr([r.row() for r in log_a]) == repr([r.row() for r in log_b])  # rows may hold nan
    assert [r.stage for r in log_a] == ["train_high_only", "train_low_only"]


def test_two_action_bandit_learns():
    """Action 0 pays 1, action 1 pays 0: the Go probability must exceed 0.9."""
    params = PolicyParams.init(3, 3, (8,), seed=0)
    obs = np.ones((64, 3))
    rng = np.random.default_rng(0)

    def collect(p):
        acts, logp = high_level_act(obs, p, rng)
        a = np.array([int(x) for x in acts])
        values = p.value_high(obs)[:, 0]
        buf = RolloutBuffer()
        buf.add("high", [
            Trajectory(k, obs=[obs[k]], actions=[int(a[k])], log_probs=[float(logp[k])], values=[float(values[k])],
                       rewards=[1.0 if a[k] == 0 else 0.0], dones=[True])
            for k in range(len(obs))
        ])
        buf.step_rewards.append(float(np.mean(a == 0)))
        return buf

    cfg = TrainConfig(lr=3e-3, minibatch_size=64, epochs_per_update=4, hidden=(8,))
    params, log = train_loop(collect, params, cfg, ("high",), 50)
    p_go = float(np.exp(log_softmax(params.high(obs[:1])))[0, 0])
    assert p_go > 0.9
    assert len(log) == 50 and params.lineage[-1] == "update:49"


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=16), st.floats(0.5, 0.999), st.floats(0.0, 1.0))
def test_gae_lambda_one_terminal_is_return_minus_value(rewards, gamma, v0):
    n = len(rewards)
    values = [v0] * n
    dones = [False] * (n - 1) + [True]
    ab = gae(rewards, values, dones, gamma, 1.0)
    ret = sum(gamma**k * r for k, r in enumerate(rewards))
    assert ab.advantages[0] == pytest.approx(ret - v0, abs=1e-9)
