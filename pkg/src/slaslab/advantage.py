"""Group-relative advantage estimators and super-linear shaping.

Everything here is a pure function of its inputs. A batch is a list of
:class:`RewardGroup` (one per prompt); every estimator returns one
:class:`AdvantageVector` per group, one scalar per rollout.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Hashable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateError, InputError, PreconditionError

DEFAULT_EPSILON = 1e-8


class Mode(str, enum.Enum):
    STD_GRPO = "std_grpo"
    MEAN_CENTERED = "mean_centered"
    SLAS = "slas"


class NormScope(str, enum.Enum):
    PROMPT = "prompt"
    BATCH = "batch"
    NONE = "none"


@dataclass(frozen=True)
class RewardGroup:
    """The G scalar rewards of one prompt's rollouts."""

    prompt_id: Hashable
    rewards: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        if r.size < 2:
            raise PreconditionError(f"group {self.prompt_id!r} has {r.size} rewards; need at least 2")
        if not np.all(np.isfinite(r)):
            raise InputError(f"group {self.prompt_id!r} contains non-finite rewards")
        r.setflags(write=False)
        object.__setattr__(self, "rewards", r)

    @property
    def size(self) -> int:
        return int(self.rewards.size)


@dataclass(frozen=True)
class ShapingConfig:
    """Which estimator to run and how to normalize it.

    ``norm_scope`` applies to the mean-centered and SLAS estimators;
    standard GRPO always normalizes per prompt.
    """

    mode: Mode = Mode.SLAS
    gamma: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    norm_scope: NormScope = NormScope.BATCH

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", Mode(self.mode))
            object.__setattr__(self, "norm_scope", NormScope(self.norm_scope))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "gamma": float(self.gamma),
            "epsilon": float(self.epsilon),
            "norm_scope": self.norm_scope.value,
        }


@dataclass(frozen=True)
class AdvantageVector:
    values: np.ndarray
    mode_used: ShapingConfig = field(default_factory=ShapingConfig)
    prompt_id: Hashable = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return int(self.values.size)


def _as_group(group) -> RewardGroup:
    return group if isinstance(group, RewardGroup) else RewardGroup(None, group)


def population_std(x: np.ndarray) -> float:
    """Standard deviation dividing by the number of entries."""
    return float(np.std(x, ddof=0))


def std_grpo_advantage(group, epsilon: float = DEFAULT_EPSILON) -> AdvantageVector:
    """Standard GRPO advantage ``(r - mean) / (popstd + epsilon)``.

    The population std (divide by G) is what reproduces the worked example
    ``[0.36, 0.37, 0.38, 0.39] -> [-1.342, -0.447, 0.447, 1.342]``.
    """
    g = _as_group(group)
    r = g.rewards
    centered = r - r.mean()
    denom = population_std(r) + epsilon
    if np.ptp(r) == 0.0 or denom == 0.0:
        # constant group: the mean can carry round-off that epsilon would amplify
        values = np.zeros_like(r)
    else:
        values = centered / denom
    cfg = ShapingConfig(Mode.STD_GRPO, 0.0, epsilon, NormScope.PROMPT)
    return AdvantageVector(values, cfg, g.prompt_id)


def mean_centered_advantage(group) -> AdvantageVector:
    g = _as_group(group)
    r = g.rewards
    cfg = ShapingConfig(Mode.MEAN_CENTERED, 0.0, DEFAULT_EPSILON, NormScope.NONE)
    values = np.zeros_like(r) if np.ptp(r) == 0.0 else r - r.mean()
    return AdvantageVector(values, cfg, g.prompt_id)


def shape_values(x, gamma: float) -> np.ndarray:
    """Elementwise ``sign(x) * |x|**(1 + gamma)``."""
    if not np.isfinite(gamma) or gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    x = np.asarray(x, dtype=np.float64)
    if gamma == 0:
        return x.copy()
    return np.sign(x) * np.abs(x) ** (1.0 + gamma)


def slas_shape(centered: AdvantageVector, gamma: float) -> AdvantageVector:
    """Super-linear shaping of a mean-centered advantage vector."""
    if not isinstance(centered, AdvantageVector):
        centered = AdvantageVector(centered, ShapingConfig(Mode.MEAN_CENTERED, 0.0, DEFAULT_EPSILON, NormScope.NONE))
    if centered.mode_used.mode is not Mode.MEAN_CENTERED:
        raise PreconditionError(
            f"slas_shape expects a mean-centered vector, got mode {centered.mode_used.mode.value}"
        )
    cfg = replace(centered.mode_used, mode=Mode.SLAS, gamma=float(gamma))
    return AdvantageVector(shape_values(centered.values, gamma), cfg, centered.prompt_id)


def batch_normalize(advantages: Sequence[AdvantageVector], epsilon: float = DEFAULT_EPSILON) -> list[AdvantageVector]:
    """Divide every scalar by the population std pooled over the whole batch.

    No re-centering is done; each group is assumed to be centered already.
    """
    advantages = list(advantages)
    if not advantages:
        raise PreconditionError("batch_normalize needs a non-empty batch")
    pooled = np.concatenate([np.asarray(a.values) for a in advantages])
    if pooled.size < 2:
        raise PreconditionError("batch_normalize needs at least 2 scalars in the batch")
    denom = population_std(pooled) + epsilon
    if denom == 0.0:
        raise DegenerateError("all-zero batch with epsilon=0; use epsilon > 0")
    out = []
    for a in advantages:
        cfg = replace(a.mode_used, epsilon=epsilon, norm_scope=NormScope.BATCH)
        out.append(AdvantageVector(np.asarray(a.values) / denom, cfg, a.prompt_id))
    return out


def _prompt_normalize(a: AdvantageVector, epsilon: float) -> AdvantageVector:
    denom = population_std(a.values) + epsilon
    values = np.zeros_like(a.values) if denom == 0.0 else a.values / denom
    cfg = replace(a.mode_used, epsilon=epsilon, norm_scope=NormScope.PROMPT)
    return AdvantageVector(values, cfg, a.prompt_id)


def compute_advantages(batch: Sequence, cfg: ShapingConfig) -> list[AdvantageVector]:
    """Run the estimator selected by ``cfg`` over a batch of groups."""
    groups = [_as_group(g) for g in batch]
    if not groups:
        raise PreconditionError("empty batch")

    if cfg.mode is Mode.STD_GRPO:
        return [std_grpo_advantage(g, cfg.epsilon) for g in groups]

    out = [mean_centered_advantage(g) for g in groups]
    if cfg.mode is Mode.SLAS:
        out = [slas_shape(a, cfg.gamma) for a in out]

    if cfg.norm_scope is NormScope.BATCH:
        out = batch_normalize(out, cfg.epsilon)
    elif cfg.norm_scope is NormScope.PROMPT:
        out = [_prompt_normalize(a, cfg.epsilon) for a in out]
    return [AdvantageVector(a.values, cfg, a.prompt_id) for a in out]
