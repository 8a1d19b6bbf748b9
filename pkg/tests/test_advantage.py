from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slaslab.advantage import (
    AdvantageVector,
    Mode,
    NormScope,
    RewardGroup,
    ShapingConfig,
    batch_normalize,
    compute_advantages,
    mean_centered_advantage,
    shape_values,
    slas_shape,
    std_grpo_advantage,
)
from slaslab.errors import ConfigError, DegenerateError, InputError, PreconditionError

# (r - mean) / popstd for an evenly spaced group of four: [-3, -1, 1, 3] / sqrt(5)
EVEN4 = np.array([-3.0, -1.0, 1.0, 3.0]) / math.sqrt(5.0)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
groups = st.lists(finite, min_size=2, max_size=16)


@pytest.mark.parametrize("rewards", [[0.360, 0.370, 0.380, 0.390], [0.366, 0.367, 0.368, 0.369]])
def test_std_grpo_example_groups(rewards):
    a = std_grpo_advantage(RewardGroup("p", rewards))
    assert np.allclose(a.values, [-1.342, -0.447, 0.447, 1.342], atol=1e-3)
    assert np.allclose(a.values, EVEN4, atol=1e-5)
    assert a.mode_used.mode is Mode.STD_GRPO


def test_std_grpo_uses_population_std():
    a = std_grpo_advantage([0.0, 1.0], epsilon=0.0)
    assert np.allclose(a.values, [-1.0, 1.0])


def test_constant_group_gives_zero():
    for eps in (0.0, 1e-8):
        assert np.array_equal(std_grpo_advantage([0.1] * 5, eps).values, np.zeros(5))
    assert np.array_equal(mean_centered_advantage([0.1] * 5).values, np.zeros(5))


def test_reward_group_validation():
    with pytest.raises(PreconditionError):
        RewardGroup("p", [1.0])
    with pytest.raises(InputError):
        RewardGroup("p", [1.0, float("nan")])


@pytest.mark.parametrize(
    "x, gamma, expected",
    [
        ([0.5, -0.5], 1.0, [0.25, -0.25]),
        ([2.0, -3.0, 0.0], 0.5, [2.0**1.5, -(3.0**1.5), 0.0]),
        ([0.3, -0.7], 0.0, [0.3, -0.7]),
    ],
)
def test_shape_values(x, gamma, expected):
    assert np.allclose(shape_values(x, gamma), expected, rtol=1e-14)


def test_shape_rejects_negative_gamma():
    with pytest.raises(ConfigError):
        shape_values([1.0], -0.1)


def test_slas_shape_requires_centered_input():
    std = std_grpo_advantage([1.0, 2.0, 3.0])
    with pytest.raises(PreconditionError):
        slas_shape(std, 1.0)
    out = slas_shape(mean_centered_advantage([1.0, 2.0, 3.0]), 1.0)
    assert np.allclose(out.values, [-1.0, 0.0, 1.0])
    assert out.mode_used.mode is Mode.SLAS


def test_batch_normalize_pools_without_recentering():
    a = AdvantageVector([1.0, -1.0])
    b = AdvantageVector([3.0, -3.0])
    out = batch_normalize([a, b], epsilon=0.0)
    pooled_std = math.sqrt((1 + 1 + 9 + 9) / 4)
    assert np.allclose(out[0].values, [1 / pooled_std, -1 / pooled_std])
    assert np.allclose(out[1].values, [3 / pooled_std, -3 / pooled_std])


def test_batch_normalize_degenerate():
    with pytest.raises(DegenerateError):
        batch_normalize([AdvantageVector([0.0, 0.0])], epsilon=0.0)
    out = batch_normalize([AdvantageVector([0.0, 0.0])], epsilon=1e-8)
    assert np.array_equal(out[0].values, [0.0, 0.0])


def test_compute_advantages_modes():
    batch = [RewardGroup(0, [0.0, 1.0]), RewardGroup(1, [0.0, 0.1])]
    std = compute_advantages(batch, ShapingConfig(Mode.STD_GRPO, epsilon=0.0))
    assert np.allclose(std[0].values, std[1].values)
    mc = compute_advantages(batch, ShapingConfig(Mode.MEAN_CENTERED, norm_scope=NormScope.NONE))
    assert np.allclose(mc[1].values, [-0.05, 0.05])
    slas = compute_advantages(batch, ShapingConfig(Mode.SLAS, gamma=1.0, epsilon=0.0, norm_scope=NormScope.BATCH))
    ratio = np.abs(slas[1].values) / np.abs(slas[0].values)
    assert np.allclose(ratio, 0.01)
    assert all(a.mode_used.mode is Mode.SLAS for a in slas)


def test_shaping_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        ShapingConfig(mode="nope")
    with pytest.raises(ConfigError):
        ShapingConfig(gamma=-1.0)
    with pytest.raises(ConfigError):
        ShapingConfig(epsilon=-1e-3)


@settings(max_examples=200, deadline=None)
@given(groups, finite)
def test_mean_centered_and_slas_are_shift_invariant(r, c):
    r = np.array(r)
    a = mean_centered_advantage(r).values
    b = mean_centered_advantage(r + c).values
    scale = max(1.0, np.max(np.abs(r)), abs(c))
    assert np.allclose(a, b, atol=1e-9 * scale)
    assert np.allclose(shape_values(a, 1.0), shape_values(b, 1.0), atol=1e-9 * scale**2)


@settings(max_examples=200, deadline=None)
@given(groups, st.floats(1e-3, 1e3))
def test_std_grpo_is_scale_invariant(r, k):
    r = np.array(r)
    if np.ptp(r) < 1e-6:
        return
    a = std_grpo_advantage(r, 0.0).values
    b = std_grpo_advantage(k * r, 0.0).values
    assert np.allclose(a, b, atol=1e-8)


@settings(max_examples=200, deadline=None)
@given(groups, st.sampled_from([0.0, 0.5, 1.0, 2.0]))
def test_shaping_is_odd_and_order_preserving(r, gamma):
    x = mean_centered_advantage(r).values
    y = shape_values(x, gamma)
    assert np.allclose(shape_values(-x, gamma), -y)
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(y[order]) >= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(groups, min_size=1, max_size=5))
def test_batch_normalized_output_has_unit_popstd(batch):
    cfg = ShapingConfig(Mode.SLAS, gamma=1.0, epsilon=0.0, norm_scope=NormScope.BATCH)
    pooled_raw = np.concatenate([shape_values(mean_centered_advantage(g).values, 1.0) for g in batch])
    if np.std(pooled_raw) < 1e-9:
        return
    out = compute_advantages(batch, cfg)
    pooled = np.concatenate([a.values for a in out])
    assert math.isclose(float(np.std(pooled)), 1.0, rel_tol=1e-9)
