from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from slaslab.advantage import Mode, NormScope, ShapingConfig
from slaslab.errors import ConfigError, InputError, NumericalError, PreconditionError
from slaslab.flow import FlowPolicy, SigmaSchedule, batch_logprob, rollout_group
from slaslab.rewards import SyntheticReward
from slaslab.trainer import (
    CSV_COLUMNS,
    EXAMPLE_GROUPS,
    TrainConfig,
    clipped_surrogate,
    default_hackable_reward,
    default_policy,
    group_updates,
    hacking_experiment,
    kl_grad,
    kl_penalty,
    surrogate_grad,
    surrogate_value,
    train,
)

STD = ShapingConfig(Mode.STD_GRPO, 0.0, 0.0, NormScope.PROMPT)
SLAS1 = ShapingConfig(Mode.SLAS, 1.0, 0.0, NormScope.BATCH)


def small_cfg(**kw):
    base = dict(iterations=5, group_size=4, prompts_per_batch=2)
    base.update(kw)
    return TrainConfig(**base)


# --- surrogate and KL --------------------------------------------------------


@pytest.mark.parametrize(
    "ratios, a, expected",
    [
        ([1.0, 1.0, 1.0], 0.7, 0.7),
        ([1.4], 2.0, 1.2 * 2.0),
        ([0.6], -2.0, 0.8 * -2.0),
        ([1.4], -2.0, 1.4 * -2.0),
        ([0.6], 2.0, 0.6 * 2.0),
    ],
)
def test_clipped_surrogate_examples(ratios, a, expected):
    assert math.isclose(clipped_surrogate(ratios, a, 0.2), expected, rel_tol=1e-14)


def test_clipped_surrogate_rejects_bad_ratio():
    with pytest.raises(PreconditionError):
        clipped_surrogate([1.0, 0.0], 1.0, 0.2)
    with pytest.raises(ConfigError):
        clipped_surrogate([1.0], 1.0, 1.5)


def test_kl_penalty_examples():
    pol = default_policy(steps=4)
    trajs = rollout_group(pol, 0, 3)
    assert kl_penalty(pol, pol, trajs) == 0.0
    # a bias shift c at every step moves each mean by a_k c
    c = np.array([0.1, 0.0])
    shifted = FlowPolicy(pol.weight, pol.bias + c, pol.sigma)
    s2 = pol.sigma(1.0) ** 2 * pol.dt
    a = -pol.dt * (1 + pol.sigma(1.0) ** 2 / (2 * pol.times) * (1 - pol.times))
    expected = np.mean((a * 0.1) ** 2 / (2 * s2))
    assert math.isclose(kl_penalty(shifted, pol, trajs), expected, rel_tol=1e-10)
    doubled = FlowPolicy(pol.weight, pol.bias + 2 * c, pol.sigma)
    assert math.isclose(kl_penalty(doubled, pol, trajs), 4 * expected, rel_tol=1e-10)


def test_kl_penalty_requires_shared_sigma():
    pol = default_policy(steps=4)
    other = FlowPolicy(pol.weight, pol.bias, SigmaSchedule("constant", 0.3))
    with pytest.raises(InputError):
        kl_penalty(pol, other, rollout_group(pol, 0, 2))


def test_kl_gradient_step_reduces_kl():
    pol = default_policy(steps=4)
    ref = FlowPolicy(pol.weight + 0.1, pol.bias - 0.2, pol.sigma)
    states = np.stack([t.states for t in rollout_group(pol, 1, 8)])
    kl0, g = kl_grad(pol, ref, states)
    moved = pol.with_theta(pol.theta - 1e-3 * g)
    assert kl_grad(moved, ref, states)[0] < kl0


def _toy_batch(seed=0, d=1, T=4, n=6):
    rng = np.random.default_rng(seed)
    pol = FlowPolicy(0.3 * rng.normal(size=(d, d)), rng.normal(size=(T, d)), SigmaSchedule("constant", 0.6))
    states = np.stack([t.states for t in rollout_group(pol, seed, n)])
    return pol, states, batch_logprob(pol, states), rng.normal(size=n)


@pytest.mark.parametrize("seed", range(5))
def test_on_policy_gradient_matches_finite_differences(seed):
    pol, states, old_logp, adv = _toy_batch(seed)
    g = surrogate_grad(pol, states, old_logp, adv, 0.2)
    th = pol.theta
    h = 1e-6
    fd = np.empty_like(th)
    for i in range(th.size):
        e = np.zeros_like(th)
        e[i] = h
        fd[i] = (surrogate_value(pol.with_theta(th + e), states, old_logp, adv, 0.2)
                 - surrogate_value(pol.with_theta(th - e), states, old_logp, adv, 0.2)) / (2 * h)
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_clip_is_inert_on_policy():
    pol, states, old_logp, adv = _toy_batch(3)
    grads = [surrogate_grad(pol, states, old_logp, adv, eps) for eps in (0.01, 0.2, 0.9)]
    assert np.array_equal(grads[0], grads[1]) and np.array_equal(grads[1], grads[2])


def test_clipped_steps_stop_contributing():
    pol, states, old_logp, adv = _toy_batch(4)
    far = pol.with_theta(pol.theta + 0.5)
    rho = np.exp(batch_logprob(far, states) - old_logp)
    g_small = surrogate_grad(far, states, old_logp, adv, 1e-3)
    g_big = surrogate_grad(far, states, old_logp, adv, 0.999)
    assert np.any(np.abs(rho - 1) > 1e-3)
    assert not np.allclose(g_small, g_big)


# --- example groups and baseline invariance --------------------------------


def test_std_grpo_example_groups_identical_updates():
    u = group_updates(default_policy(), STD)
    assert np.max(np.abs(u[0] - u[1])) <= 1e-10
    assert np.linalg.norm(u[0]) > 0


def test_slas_example_group_update_ratio():
    u = group_updates(default_policy(), SLAS1)
    ratio = np.linalg.norm(u[1]) / np.linalg.norm(u[0])
    assert abs(ratio - 0.01) <= 0.001


@pytest.mark.parametrize("mode", [Mode.MEAN_CENTERED, Mode.SLAS])
@pytest.mark.parametrize("shift", [-3.0, 0.5, 100.0])
def test_baseline_shift_leaves_update_unchanged(mode, shift):
    cfg = ShapingConfig(mode, 1.0, 1e-8, NormScope.BATCH)
    groups = [np.array([0.1, 0.5, -0.2, 0.3]), np.array([1.0, 0.2, 0.4, 0.9])]
    shifted = [groups[0] + shift, groups[1] - 2 * shift]
    u = group_updates(default_policy(), cfg, groups)
    v = group_updates(default_policy(), cfg, shifted)
    for a, b in zip(u, v):
        assert np.max(np.abs(a - b)) <= 1e-10


# --- training loop ------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(clip_eps=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(group_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    assert TrainConfig(shaping={"mode": "std_grpo"}).shaping.mode is Mode.STD_GRPO


def test_zero_iterations():
    pol = default_policy()
    log = train(pol, default_hackable_reward(), small_cfg(iterations=0))
    assert len(log) == 0
    assert log.final_policy is pol
    assert log.csv_text() == ",".join(CSV_COLUMNS) + "\n"


def test_constant_reward_only_kl_moves_parameters():
    pol = default_policy(steps=4)
    flat = SyntheticReward(np.zeros(2), 0.0, 0.0, None, (0.0,))
    log = train(pol, flat, small_cfg(iterations=3))
    assert np.array_equal(log.final_policy.theta, pol.theta)
    assert all(r.adv_min == r.adv_max == 0.0 for r in log.records)
    ref = FlowPolicy(pol.weight, pol.bias + 0.3, pol.sigma)
    cfg = small_cfg(iterations=1, kl_beta=0.5)
    moved = train(pol, flat, cfg, ref_policy=ref).final_policy
    assert np.linalg.norm(moved.bias - ref.bias) < np.linalg.norm(pol.bias - ref.bias)


def test_training_is_deterministic():
    cfg = small_cfg(iterations=4)
    a = train(default_policy(), default_hackable_reward(), cfg)
    b = train(default_policy(), default_hackable_reward(), cfg)
    assert a.csv_text() == b.csv_text()
    assert np.array_equal(a.final_policy.theta, b.final_policy.theta)
    c = train(default_policy(), default_hackable_reward(), replace(cfg, seed=1))
    assert c.csv_text() != a.csv_text()


def test_log_records_are_finite_and_ordered():
    log = train(default_policy(), default_hackable_reward(), small_cfg(iterations=6))
    assert [r.iteration for r in log.records] == list(range(6))
    for name in CSV_COLUMNS[1:]:
        assert np.all(np.isfinite(log.column(name)))
    assert {r.gamma_bound_status for r in log.records} <= {"within", "exceeds", "infeasible", "n/a"}
    lines = log.csv_text().split("\n")
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 8


def test_divergence_aborts_with_record():
    with pytest.raises(NumericalError) as info:
        train(default_policy(steps=4), default_hackable_reward(), small_cfg(iterations=20, lr=1e200))
    assert "iteration" in info.value.record


def test_sigma_zero_rejected():
    pol = FlowPolicy.gaussian_init(2, 4, sigma=SigmaSchedule("constant", 0.0))
    with pytest.raises(PreconditionError):
        train(pol, default_hackable_reward(), small_cfg())


def test_reward_dimension_checked():
    with pytest.raises(InputError):
        train(default_policy(), SyntheticReward(np.zeros(3)), small_cfg())


@pytest.mark.parametrize("seed", range(5))
def test_true_reward_rises_on_unhackable_reward(seed):
    reward = default_hackable_reward(hack_coeff=0.0, noise_std=0.0)
    cfg = TrainConfig(ShapingConfig(Mode.SLAS, 0.0), iterations=51, seed=seed)
    t = train(default_policy(), reward, cfg).column("true_mean")
    assert int(np.sum(np.diff(t) > 0)) >= 45


def test_hacking_experiment_same_config_is_identical():
    cfg = small_cfg(iterations=3, shaping=STD)
    logs = {}
    cmp = hacking_experiment(cfg, cfg, default_hackable_reward(), [0, 1], logs=logs)
    assert cmp.deltas_true == [0.0, 0.0]
    assert logs[("a", 0)].csv_text() == logs[("b", 0)].csv_text()


def test_hacking_experiment_rejects_mismatch():
    a = small_cfg(shaping=STD)
    with pytest.raises(ConfigError):
        hacking_experiment(a, replace(a, shaping=SLAS1, lr=0.1), default_hackable_reward(), [0])
    with pytest.raises(PreconditionError):
        hacking_experiment(a, a, default_hackable_reward(), [])


def test_unhackable_reward_gives_similar_outcomes():
    reward = default_hackable_reward(hack_coeff=0.0)
    a = TrainConfig(STD, iterations=60)
    cmp = hacking_experiment(a, replace(a, shaping=SLAS1), reward, [0, 1, 2])
    s = cmp.summary()
    # both improve well beyond the initial -6 and land in the same band
    assert s["median_final_true_a"] > -3 and s["median_final_true_b"] > -3
    assert s["median_hack_drift_a"] < 0.5 and s["median_hack_drift_b"] < 0.5


# --- synthetic reward ---------------------------------------------------------


def test_synthetic_reward_formula_and_determinism():
    rw = SyntheticReward(np.array([0.0, 1.0]), 0.5, 0.1, None, (1.0, 0.1))
    y = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert rw.true_reward(y).tolist() == [-1.0, -1.0]
    a = rw.proxy_reward(y, 0, 42)
    assert np.array_equal(a, rw.proxy_reward(y, 0, 42))
    noiseless = replace(rw, noise_std=0.0)
    assert noiseless.proxy_reward(y, 1, 0).tolist() == [0.1 * -1.0 + 0.5, -0.1]
    assert np.all(np.abs(a - noiseless.proxy_reward(y, 0, 42)) < 1.0)


def test_synthetic_reward_clip_and_validation():
    rw = SyntheticReward(np.zeros(1), 0.0, 0.0, (-1.0, 0.0))
    assert rw.proxy_reward(np.array([[5.0]])).tolist() == [-1.0]
    with pytest.raises(InputError):
        SyntheticReward(np.zeros(1), noise_std=-1.0)
    with pytest.raises(InputError):
        SyntheticReward(np.zeros(1), clip_range=(1.0, 0.0))
    with pytest.raises(InputError):
        rw.proxy_reward(np.zeros((2, 3)))


def test_expected_true_reward():
    rw = SyntheticReward(np.array([1.0, 0.0]))
    assert rw.expected_true_reward(np.array([1.0, 2.0]), np.diag([0.5, 0.25])) == -4.75


def test_example_groups_constant():
    assert [g.tolist() for g in EXAMPLE_GROUPS] == [[0.36, 0.37, 0.38, 0.39], [0.366, 0.367, 0.368, 0.369]]
