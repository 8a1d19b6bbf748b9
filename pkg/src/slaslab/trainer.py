"""Clipped-surrogate policy optimization over flow-SDE rollouts.

One iteration: freeze the current policy, roll out ``G`` samples for each
of ``P`` prompts, score endpoints with the proxy reward, turn each group
into advantages, broadcast every sample's advantage to all of its steps
and take plain gradient-ascent steps on

    mean_{i,k} min(rho_ik A_i, clip(rho_ik, 1-eps, 1+eps) A_i) - beta * KL(pi || pi_ref)

with the KL measured per step between Gaussian transition kernels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .advantage import Mode, RewardGroup, ShapingConfig, compute_advantages
from .errors import ConfigError, DegenerateError, InputError, NumericalError, PreconditionError, SlasError
from .flow import (
    FlowPolicy,
    SigmaSchedule,
    batch_logprob,
    endpoint_moments,
    logprob_grad,
    per_sample_scores,
    pullback_mean_grad,
    rollout_group,
    transition_means,
)
from .rewards import SyntheticReward
from .trust_region import TrustRegionBudget, gamma_bound_moment

CSV_COLUMNS = ("iteration", "proxy_mean", "true_mean", "kl", "grad_norm", "adv_min", "adv_max", "adv_std")


@dataclass(frozen=True)
class TrainConfig:
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    lr: float = 2.0
    group_size: int = 8
    prompts_per_batch: int = 8
    iterations: int = 150
    seed: int = 0
    inner_epochs: int = 1
    trust_zeta: float = 0.05

    def __post_init__(self):
        if isinstance(self.shaping, dict):
            object.__setattr__(self, "shaping", ShapingConfig(**self.shaping))
        if not 0 < self.clip_eps < 1:
            raise ConfigError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if not (np.isfinite(self.kl_beta) and self.kl_beta >= 0):
            raise ConfigError(f"kl_beta must be >= 0, got {self.kl_beta}")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        for name in ("prompts_per_batch", "inner_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not self.trust_zeta > 0:
            raise ConfigError("trust_zeta must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shaping"] = self.shaping.to_dict()
        return d


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    proxy_mean: float
    true_mean: float
    kl: float
    grad_norm: float
    adv_min: float
    adv_max: float
    adv_std: float
    gamma_bound_status: str = "n/a"
    hack_drift: float = 0.0

    def csv_row(self) -> list[str]:
        return [str(self.iteration)] + [repr(float(getattr(self, c))) for c in CSV_COLUMNS[1:]]


@dataclass
class TrainLog:
    records: list[IterationRecord] = field(default_factory=list)
    final_policy: FlowPolicy | None = None

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def csv_text(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        lines += [",".join(r.csv_row()) for r in self.records]
        return "\n".join(lines) + "\n"


def clipped_surrogate(ratios, advantage: float, clip_eps: float) -> float:
    """Step-averaged ``min(rho A, clip(rho, 1-eps, 1+eps) A)``."""
    rho = np.asarray(ratios, dtype=np.float64).reshape(-1)
    if rho.size == 0 or np.any(~(rho > 0)):
        raise PreconditionError("importance ratios must be > 0")
    if not 0 < clip_eps < 1:
        raise ConfigError(f"clip_eps must lie in (0, 1), got {clip_eps}")
    a = float(advantage)
    return float(np.mean(np.minimum(rho * a, np.clip(rho, 1 - clip_eps, 1 + clip_eps) * a)))


def _kl_terms(policy: FlowPolicy, ref: FlowPolicy, states):
    means, stds = transition_means(policy, states)
    ref_means, _ = transition_means(ref, states)
    if np.any(stds == 0):
        raise DegenerateError("KL between transition kernels is undefined when sigma_t = 0")
    diff = means - ref_means
    per_step = np.sum(diff * diff, axis=-1) / (2.0 * stds[None, :] ** 2)
    return per_step, diff / (stds**2)[None, :, None]


def kl_penalty(policy: FlowPolicy, ref_policy: FlowPolicy, trajectories) -> float:
    """Mean over samples and steps of the per-step Gaussian KL to ``ref_policy``.

    Both kernels share ``sigma_t``, so each step contributes
    ``||mean - mean_ref||^2 / (2 s^2)`` exactly.
    """
    states = _stack_states(trajectories)
    if policy.sigmas().tolist() != ref_policy.sigmas().tolist():
        raise InputError("policy and reference must share the sigma schedule")
    per_step, _ = _kl_terms(policy, ref_policy, states)
    return float(per_step.mean())


def _stack_states(trajectories) -> np.ndarray:
    if isinstance(trajectories, np.ndarray):
        return trajectories if trajectories.ndim == 3 else trajectories[None]
    return np.stack([t.states for t in trajectories])


def surrogate_value(policy: FlowPolicy, states, old_logp, advantages, clip_eps: float) -> float:
    """Batch surrogate: mean over samples of :func:`clipped_surrogate`."""
    rho = np.exp(batch_logprob(policy, states) - old_logp)
    a = np.asarray(advantages, dtype=np.float64)[:, None]
    return float(np.mean(np.minimum(rho * a, np.clip(rho, 1 - clip_eps, 1 + clip_eps) * a)))


def surrogate_grad(policy: FlowPolicy, states, old_logp, advantages, clip_eps: float) -> np.ndarray:
    """Gradient of :func:`surrogate_value` w.r.t. ``theta``.

    Steps where the clipped branch is the minimum contribute nothing.
    """
    n, T = old_logp.shape
    rho = np.exp(batch_logprob(policy, states) - old_logp)
    a = np.asarray(advantages, dtype=np.float64)[:, None]
    active = rho * a <= np.clip(rho, 1 - clip_eps, 1 + clip_eps) * a
    w = np.where(active, rho * a, 0.0) / (n * T)
    return logprob_grad(policy, states, w)


def kl_grad(policy: FlowPolicy, ref: FlowPolicy, states) -> tuple[float, np.ndarray]:
    per_step, dmean = _kl_terms(policy, ref, states)
    n, T = per_step.shape
    return float(per_step.mean()), pullback_mean_grad(policy, states, dmean) / (n * T)


def prompt_seed(seed: int, iteration: int, prompt: int) -> int:
    return int(np.random.SeedSequence([seed, iteration, prompt]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class Batch:
    states: np.ndarray  # (N, T+1, d)
    proxy: np.ndarray  # (N,)
    advantages: np.ndarray  # (N,)
    centered: np.ndarray  # (N,) group-centred proxy rewards


def collect_batch(policy: FlowPolicy, reward: SyntheticReward, cfg: TrainConfig, iteration: int) -> Batch:
    states, proxies, groups = [], [], []
    for p in range(cfg.prompts_per_batch):
        ps = prompt_seed(cfg.seed, iteration, p)
        trajs = rollout_group(policy, ps, cfg.group_size)
        s = np.stack([t.states for t in trajs])
        r = reward.proxy_reward(s[:, -1], p, ps)
        states.append(s)
        proxies.append(r)
        groups.append(RewardGroup(p, r))
    advs = compute_advantages(groups, cfg.shaping)
    proxy = np.concatenate(proxies)
    centered = np.concatenate([r - r.mean() for r in proxies])
    return Batch(np.concatenate(states), proxy, np.concatenate([a.values for a in advs]), centered)


def _gamma_status(policy: FlowPolicy, batch: Batch, cfg: TrainConfig) -> str:
    """Compare the configured gamma with the moment-oracle trust-region bound."""
    scores = per_sample_scores(policy, batch.states)
    g_max = float(np.mean(np.einsum("ij,ij->i", scores, scores)))
    lam = float(np.linalg.eigvalsh(scores.T @ scores / scores.shape[0])[-1])
    if not (g_max > 0 and lam > 0 and np.any(batch.centered != 0)):
        return "n/a"
    try:
        budget = TrustRegionBudget(zeta=cfg.trust_zeta, tau=cfg.lr, g_max=g_max, lambda_max=lam)
        rep = gamma_bound_moment(budget, batch.centered)
    except (SlasError, ArithmeticError):
        return "n/a"
    if not rep.feasible:
        return "infeasible"
    gamma = cfg.shaping.gamma if cfg.shaping.mode is Mode.SLAS else 0.0
    return "within" if gamma <= rep.gamma_max else "exceeds"


def train(policy: FlowPolicy, reward: SyntheticReward, cfg: TrainConfig, ref_policy: FlowPolicy | None = None) -> TrainLog:
    """Run ``cfg.iterations`` rollout/update rounds; deterministic given ``cfg.seed``.

    ``true_mean`` is the exact expected true reward of the policy that
    generated the iteration's rollouts (its endpoint is Gaussian).
    """
    if reward.dim != policy.dim:
        raise InputError(f"reward dimension {reward.dim} does not match policy dimension {policy.dim}")
    if np.any(policy.sigmas() <= 0):
        raise PreconditionError("training needs sigma_t > 0 on every step")
    ref = policy if ref_policy is None else ref_policy
    log = TrainLog(final_policy=policy)
    current = policy
    for it in range(cfg.iterations):
        old = current
        with np.errstate(over="ignore", invalid="ignore"):
            m, S = endpoint_moments(old)
            true_mean = reward.expected_true_reward(m, S)
            states_ok = True
            try:
                batch = collect_batch(old, reward, cfg, it)
            except InputError:
                states_ok = False
        if not states_ok or not np.all(np.isfinite(batch.states)):
            record = {"iteration": it, "theta": old.theta.tolist(), "true_mean": true_mean}
            raise NumericalError(f"rollouts became non-finite at iteration {it}", record)
        old_logp = batch_logprob(old, batch.states)
        theta = old.theta
        grad_norm = 0.0
        kl = 0.0
        for _ in range(cfg.inner_epochs):
            g_sur = surrogate_grad(current, batch.states, old_logp, batch.advantages, cfg.clip_eps)
            kl, g_kl = kl_grad(current, ref, batch.states)
            g = g_sur - cfg.kl_beta * g_kl
            grad_norm = float(np.linalg.norm(g))
            if not np.all(np.isfinite(g)):
                record = {
                    "iteration": it,
                    "theta": theta.tolist(),
                    "advantages": batch.advantages.tolist(),
                    "kl": kl,
                }
                raise NumericalError(f"non-finite gradient at iteration {it}", record)
            theta = theta + cfg.lr * g
            if not np.all(np.isfinite(theta)):
                raise NumericalError(f"parameters overflowed at iteration {it}", {"iteration": it, "grad_norm": grad_norm})
            current = old.with_theta(theta)
        a = batch.advantages
        rec = IterationRecord(
            iteration=it,
            proxy_mean=float(batch.proxy.mean()),
            true_mean=true_mean,
            kl=kl,
            grad_norm=grad_norm,
            adv_min=float(a.min()),
            adv_max=float(a.max()),
            adv_std=float(a.std()),
            gamma_bound_status=_gamma_status(old, batch, cfg),
            hack_drift=abs(float(m[0])),
        )
        if not all(math.isfinite(v) for v in (rec.proxy_mean, rec.true_mean, rec.kl)):
            raise NumericalError(f"non-finite log entry at iteration {it}", asdict(rec))
        log.records.append(rec)
    log.final_policy = current
    return log


def default_policy(steps: int = 16, sigma: float = 0.7) -> FlowPolicy:
    """Two-dimensional toy transporting N(0, I) noise toward the origin."""
    return FlowPolicy.gaussian_init(2, steps, sigma=SigmaSchedule("constant", sigma))


def default_hackable_reward(hack_coeff: float = 0.5, noise_std: float = 0.01) -> SyntheticReward:
    """Target ``(0, 2)``; every other prompt is nearly blind to the target."""
    return SyntheticReward(np.array([0.0, 2.0]), hack_coeff, noise_std, None, (1.0, 0.02))


@dataclass(frozen=True)
class RunSummary:
    seed: int
    final_true: float
    final_proxy: float
    hack_drift: float


@dataclass(frozen=True)
class HackComparison:
    runs_a: list[RunSummary]
    runs_b: list[RunSummary]

    @staticmethod
    def _median(runs, name) -> float:
        return float(np.median([getattr(r, name) for r in runs]))

    @property
    def deltas_true(self) -> list[float]:
        return [b.final_true - a.final_true for a, b in zip(self.runs_a, self.runs_b)]

    @property
    def deltas_drift(self) -> list[float]:
        return [b.hack_drift - a.hack_drift for a, b in zip(self.runs_a, self.runs_b)]

    def summary(self) -> dict:
        out = {}
        for tag, runs in (("a", self.runs_a), ("b", self.runs_b)):
            for name in ("final_true", "final_proxy", "hack_drift"):
                out[f"median_{name}_{tag}"] = self._median(runs, name)
        out["median_delta_true"] = float(np.median(self.deltas_true))
        out["median_delta_drift"] = float(np.median(self.deltas_drift))
        out["seeds"] = [r.seed for r in self.runs_a]
        return out


def summarize_run(log: TrainLog, reward: SyntheticReward, seed: int, cfg: TrainConfig) -> RunSummary:
    m, S = endpoint_moments(log.final_policy)
    final_proxy = float(log.records[-1].proxy_mean) if log.records else float("nan")
    return RunSummary(seed, reward.expected_true_reward(m, S), final_proxy, abs(float(m[0])))


def hacking_experiment(
    cfg_a: TrainConfig,
    cfg_b: TrainConfig,
    reward: SyntheticReward,
    seeds: Sequence[int],
    policy: FlowPolicy | None = None,
    logs: dict | None = None,
) -> HackComparison:
    """Train both configs on the same seeds and compare final outcomes.

    If ``logs`` is a dict it receives ``(tag, seed) -> TrainLog``.
    """
    if replace(cfg_b, shaping=cfg_a.shaping) != cfg_a:
        raise ConfigError("hacking_experiment configs may differ only in shaping")
    if not seeds:
        raise PreconditionError("need at least one seed")
    policy = default_policy() if policy is None else policy
    runs = {"a": [], "b": []}
    for seed in seeds:
        for tag, cfg in (("a", cfg_a), ("b", cfg_b)):
            c = replace(cfg, seed=int(seed))
            log = train(policy, reward, c)
            if logs is not None:
                logs[(tag, int(seed))] = log
            runs[tag].append(summarize_run(log, reward, int(seed), c))
    return HackComparison(runs["a"], runs["b"])


EXAMPLE_GROUPS = (
    np.array([0.360, 0.370, 0.380, 0.390]),
    np.array([0.366, 0.367, 0.368, 0.369]),
)


def group_updates(policy: FlowPolicy, shaping: ShapingConfig, reward_groups=EXAMPLE_GROUPS, lr: float = 1.0, seed: int = 0) -> list[np.ndarray]:
    """On-policy parameter update attributable to each reward group.

    All groups share one set of rollouts and are normalized together as a
    single batch; at ``theta = theta_old`` the ratios are exactly 1, so
    each group's update is ``lr * mean_{i,k} A_i grad log p``.
    """
    reward_groups = [np.asarray(g, dtype=np.float64) for g in reward_groups]
    G = reward_groups[0].size
    if any(g.size != G for g in reward_groups):
        raise InputError("reward groups must share the group size")
    states = np.stack([t.states for t in rollout_group(policy, seed, G)])
    advs = compute_advantages([RewardGroup(i, g) for i, g in enumerate(reward_groups)], shaping)
    n_total = G * len(reward_groups)
    out = []
    for a in advs:
        w = np.repeat(a.values[:, None], policy.steps, axis=1) / (n_total * policy.steps)
        out.append(lr * logprob_grad(policy, states, w))
    return out
