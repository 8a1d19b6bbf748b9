"""Trust-region bounds on the shaping exponent gamma.

A first-order step ``tau * g`` with ``g = E[|dr|^gamma dr grad log pi]``
moves the policy by roughly ``tau^2/2 g^T F g`` in KL, which is at most
``tau^2/2 * lambda_max * M_{2(1+gamma)} * G_max``. Keeping that under a
budget ``zeta`` caps the reward moment and hence gamma.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ConvergenceError, DegenerateError, DomainError, InputError, PreconditionError
from .simplex import softmax, softmax_score_jacobian


class Regime(str, enum.Enum):
    BOUNDED = "bounded"
    SUB_GAUSSIAN = "sub_gaussian"
    MOMENT_ORACLE = "moment_oracle"


@dataclass(frozen=True)
class TrustRegionBudget:
    zeta: float
    tau: float
    g_max: float
    lambda_max: float
    r_max: float | None = None
    k_r: float | None = None
    c_const: float = 1.0

    def __post_init__(self):
        for name in ("zeta", "tau", "g_max", "lambda_max", "c_const"):
            v = getattr(self, name)
            if v is None or not np.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be a positive finite number, got {v!r}")
        for name in ("r_max", "k_r"):
            v = getattr(self, name)
            if v is not None and (not np.isfinite(v) or v <= 0):
                raise ConfigError(f"{name} must be positive when set, got {v!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GammaBoundReport:
    budget_rhs: float
    gamma_max: float | None
    regime: Regime
    residual: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.gamma_max is not None

    def to_dict(self) -> dict:
        return {
            "budget_rhs": self.budget_rhs,
            "gamma_max": self.gamma_max if self.feasible else "infeasible",
            "regime": self.regime.value,
            "residual": self.residual,
        }


def moment_bound_rhs(budget: TrustRegionBudget) -> float:
    """Largest admissible ``E|dr|^{2(1+gamma)}``: ``2 zeta / (tau^2 lambda_max G_max)``."""
    return 2.0 * budget.zeta / (budget.tau * budget.tau * budget.lambda_max * budget.g_max)


def gamma_bound_bounded(budget: TrustRegionBudget) -> GammaBoundReport:
    """gamma_max when ``|dr| <= r_max``; only defined for ``r_max > 1``."""
    if budget.r_max is None:
        raise ConfigError("r_max must be set for the bounded-reward bound")
    rhs = moment_bound_rhs(budget)
    if budget.r_max == 1.0:
        raise DegenerateError("r_max = 1 makes the bound's denominator log(r_max) vanish")
    if budget.r_max < 1.0:
        # the inequality flips direction for log(r_max) < 0
        raise DomainError("r_max < 1 is outside the regime where the bounded-reward corollary applies")
    g = math.log(rhs) / (2.0 * math.log(budget.r_max)) - 1.0
    if -1e-12 < g < 0:
        g = 0.0
    return GammaBoundReport(rhs, g if g >= 0 else None, Regime.BOUNDED)


def subgaussian_lhs(gamma: float, c_const: float, k_r: float) -> float:
    """``(1+gamma) * [log(1+gamma) + log(2 C^2 K_r^2)]``."""
    return (1.0 + gamma) * (math.log1p(gamma) + math.log(2.0 * c_const**2 * k_r**2))


def gamma_bound_subgaussian(budget: TrustRegionBudget, tol: float = 1e-13) -> GammaBoundReport:
    """Largest gamma with ``subgaussian_lhs(gamma) <= log(rhs)``, by bisection."""
    if budget.k_r is None:
        raise ConfigError("k_r must be set for the sub-Gaussian bound")
    rhs = moment_bound_rhs(budget)
    target = math.log(rhs)
    c, k = budget.c_const, budget.k_r

    def f(g):
        return subgaussian_lhs(g, c, k) - target

    if f(0.0) > 0:
        if f(0.0) <= 1e-12 * max(1.0, abs(target)):
            # tight at gamma = 0 up to round-off
            return GammaBoundReport(rhs, 0.0, Regime.SUB_GAUSSIAN, residual=f(0.0))
        return GammaBoundReport(rhs, None, Regime.SUB_GAUSSIAN)
    # lhs is convex in gamma; it increases beyond its minimiser
    lo = max(0.0, 1.0 / (2.0 * c * c * k * k * math.e) - 1.0)
    if f(lo) > 0:
        lo = 0.0
    hi = max(1.0, 2.0 * lo + 1.0)
    while f(hi) <= 0:
        hi *= 2.0
        if hi > 1e12:
            raise ConvergenceError("sub-Gaussian bound does not bracket", last=hi)
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if f(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return GammaBoundReport(rhs, lo, Regime.SUB_GAUSSIAN, residual=f(lo))


def gamma_bound_moment(budget: TrustRegionBudget, centered_rewards, gamma_cap: float = 10.0, tol: float = 1e-10) -> GammaBoundReport:
    """Largest gamma in ``[0, gamma_cap]`` whose empirical moment fits the budget.

    ``log E|dr|^{2(1+gamma)}`` is convex in gamma, so the admissible set
    is an interval; its upper end is found by bisection.
    """
    dr = np.abs(np.asarray(centered_rewards, dtype=np.float64).reshape(-1))
    if dr.size == 0:
        raise InputError("need at least one centred reward")
    rhs = moment_bound_rhs(budget)

    def excess(g):
        return float(np.mean(dr ** (2.0 * (1.0 + g)))) - rhs

    if excess(0.0) > 0:
        return GammaBoundReport(rhs, None, Regime.MOMENT_ORACLE)
    if excess(gamma_cap) <= 0:
        return GammaBoundReport(rhs, gamma_cap, Regime.MOMENT_ORACLE, residual=excess(gamma_cap))
    lo, hi = 0.0, gamma_cap
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if excess(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return GammaBoundReport(rhs, lo, Regime.MOMENT_ORACLE, residual=excess(lo))


def estimate_lambda_max(
    fisher_vector_product: Callable[[np.ndarray], np.ndarray],
    dim: int,
    iterations: int = 50,
    tol: float = 1e-10,
    seed: int = 0,
) -> float:
    """Dominant eigenvalue of a PSD operator by power iteration.

    Only operator applications are used. Returns the Rayleigh quotient of
    the last iterate once its relative change drops below ``tol``.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    prev = None
    for _ in range(iterations):
        w = np.asarray(fisher_vector_product(v), dtype=np.float64)
        rq = float(np.dot(v, w))
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        if prev is not None and abs(rq - prev) <= tol * abs(rq):
            return rq
        prev = rq
        v = w / norm
    raise ConvergenceError(f"power iteration did not converge in {iterations} iterations", residual=None, last=prev)


def estimate_g_max(score_sampler: Callable[[np.random.Generator, int], np.ndarray], trials: int = 10_000, seed: int = 0) -> float:
    """Conservative ``E||score||^2``: Monte-Carlo mean plus three standard errors."""
    if trials < 1000:
        raise PreconditionError(f"trials must be >= 1000, got {trials}")
    rng = np.random.default_rng(seed)
    s = np.asarray(score_sampler(rng, trials), dtype=np.float64).reshape(trials, -1)
    sq = np.einsum("ij,ij->i", s, s)
    return float(sq.mean() + 3.0 * sq.std(ddof=1) / math.sqrt(trials))


@dataclass(frozen=True)
class SoftmaxFamily:
    """Categorical policy with logit parameters, small enough to enumerate."""

    logits: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        if z.size < 2 or not np.all(np.isfinite(z)):
            raise InputError("need at least two finite logits")
        object.__setattr__(self, "logits", z)

    @property
    def n(self) -> int:
        return int(self.logits.size)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def scores(self) -> np.ndarray:
        return softmax_score_jacobian(self.probs)

    def fisher(self) -> np.ndarray:
        p = self.probs
        return np.diag(p) - np.outer(p, p)

    def fisher_vector_product(self, v) -> np.ndarray:
        p = self.probs
        return p * v - p * float(np.dot(p, v))

    def score_sampler(self, rng: np.random.Generator, size: int) -> np.ndarray:
        ys = rng.choice(self.n, size=size, p=self.probs)
        return self.scores()[ys]

    def shifted(self, step) -> "SoftmaxFamily":
        return SoftmaxFamily(self.logits + np.asarray(step, dtype=np.float64))


def categorical_kl(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def shaped_gradient(family: SoftmaxFamily, rewards, gamma: float) -> np.ndarray:
    """``E_pi[|dr|^gamma dr grad log pi]`` by enumeration, ``dr = r - E_pi[r]``."""
    p = family.probs
    r = np.asarray(rewards, dtype=np.float64)
    dr = r - float(np.dot(p, r))
    shaped = np.abs(dr) ** gamma * dr if gamma > 0 else dr
    return (p * shaped) @ family.scores()


@dataclass(frozen=True)
class KLBoundCheck:
    measured_kl: float
    bound: float
    holds: bool
    quadratic_kl: float
    exact_bound: float
    lambda_max: float
    g_max: float
    moment: float

    def to_dict(self) -> dict:
        return asdict(self)


def empirical_kl_bound_check(
    family: SoftmaxFamily,
    rewards,
    gamma: float,
    tau: float,
    trials: int = 10_000,
    seed: int = 0,
    max_kl: float = 0.01,
) -> KLBoundCheck:
    """Take one shaped step and compare its exact KL with the trust-region bound.

    The bound is assembled the way it would be in practice: ``lambda_max``
    by power iteration on Fisher-vector products and ``G_max`` by the
    conservative Monte-Carlo estimate. The moment is enumerated exactly.
    ``exact_bound`` uses the enumerated Fisher eigenvalue and score norm.
    """
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if r.size != family.n:
        raise InputError(f"{r.size} rewards for {family.n} outcomes")
    p = family.probs
    g = shaped_gradient(family, r, gamma)
    new = family.shifted(tau * g)
    q = new.probs
    if not np.all(np.isfinite(q)) or np.any(q <= 0):
        raise DomainError("step left the interior of the family")
    measured = categorical_kl(q, p)
    if measured > max_kl:
        raise PreconditionError(f"measured KL {measured:.3e} exceeds the small-step regime ({max_kl})")

    F = family.fisher()
    quad = 0.5 * tau**2 * float(g @ F @ g)
    dr = r - float(np.dot(p, r))
    moment = float(np.dot(p, np.abs(dr) ** (2.0 * (1.0 + gamma))))

    lam = estimate_lambda_max(family.fisher_vector_product, family.n, iterations=10_000, tol=1e-12, seed=seed)
    gmax = estimate_g_max(family.score_sampler, trials=trials, seed=seed)
    bound = 0.5 * tau**2 * lam * moment * gmax

    lam_exact = float(np.linalg.eigvalsh(F)[-1])
    s = family.scores()
    g_exact = float(np.dot(p, np.einsum("ij,ij->i", s, s)))
    exact_bound = 0.5 * tau**2 * lam_exact * moment * g_exact
    return KLBoundCheck(measured, bound, measured <= bound, quad, exact_bound, lam, gmax, moment)
