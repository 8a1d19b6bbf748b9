"""Optimal functional ascent on an explicit probability simplex.

The local update problem is the concave QP

    maximize  sum_y r_y d_y - 1/(2 eta) * sum_y d_y**2 / (w_y * pi_y)
    s.t.      sum_y d_y = 0

with unit weights for the plain Fisher-Rao metric and ``w = |A|**gamma``
for the advantage-weighted metric. Closed forms come from the Lagrange
stationarity condition; :func:`brute_force_ascent` solves the same QP
numerically without using it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import ConvergenceError, DegenerateError, DomainError, InputError, PreconditionError


@dataclass(frozen=True)
class SimplexPolicy:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if p.size < 1 or not np.all(np.isfinite(p)):
            raise InputError("probs must be a non-empty finite vector")
        if np.any(p <= 0):
            raise PreconditionError("every outcome needs strictly positive probability")
        if abs(p.sum() - 1.0) > 1e-12:
            raise InputError(f"probs sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n(self) -> int:
        return int(self.probs.size)

    @classmethod
    def from_logits(cls, logits) -> "SimplexPolicy":
        return cls(softmax(logits))

    def expect(self, f) -> float:
        return float(np.dot(self.probs, f))


@dataclass(frozen=True)
class AscentDirection:
    delta: np.ndarray
    multiplier: float
    step: float
    weights: np.ndarray | None = None

    def objective(self, policy: SimplexPolicy, rewards) -> float:
        """First-order change of the expected reward, ``sum r * delta``."""
        return float(np.dot(rewards, self.delta))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    p = e / e.sum()
    # exact renormalization keeps the simplex invariant at 1e-12
    return p / p.sum()


def softmax_score_jacobian(probs) -> np.ndarray:
    """Rows are ``grad_theta log pi(y)`` for the logit parameterization."""
    p = np.asarray(probs, dtype=np.float64)
    return np.eye(p.size) - p[None, :]


def _check(policy: SimplexPolicy, rewards, eta: float) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if r.size != policy.n:
        raise InputError(f"{r.size} rewards for {policy.n} outcomes")
    if not np.all(np.isfinite(r)):
        raise InputError("rewards must be finite")
    if not eta > 0:
        raise PreconditionError(f"eta must be > 0, got {eta}")
    return r


def optimal_ascent_linear(policy: SimplexPolicy, rewards, eta: float = 1.0) -> AscentDirection:
    """``delta = eta * pi * (r - E_pi[r])``; the multiplier is ``-E_pi[r]``."""
    r = _check(policy, rewards, eta)
    lam = -policy.expect(r)
    delta = eta * policy.probs * (r + lam)
    return AscentDirection(delta, lam, eta, np.ones_like(r))


def metric_weights(metric_advantage, gamma: float) -> np.ndarray:
    a = np.abs(np.asarray(metric_advantage, dtype=np.float64))
    if gamma == 0:
        return np.ones_like(a)
    return a ** gamma


def optimal_ascent_weighted(
    policy: SimplexPolicy,
    rewards,
    metric_advantage,
    gamma: float,
    eta: float = 1.0,
) -> AscentDirection:
    """Closed-form ascent under the ``|A|**gamma``-weighted metric.

    ``delta = eta * w * pi * (r + lam)`` with ``lam`` fixed by the
    zero-mass constraint. Coordinates with zero weight stay at zero.
    """
    r = _check(policy, rewards, eta)
    if gamma < 0:
        raise PreconditionError(f"gamma must be >= 0, got {gamma}")
    w = metric_weights(metric_advantage, gamma)
    if w.size != r.size:
        raise InputError("metric_advantage length must match rewards")
    wp = w * policy.probs
    mass = wp.sum()
    if mass == 0:
        raise DegenerateError("all metric weights are zero")
    lam = -float(np.dot(wp, r)) / float(mass)
    delta = eta * wp * (r + lam)
    return AscentDirection(delta, lam, eta, w)


def self_consistent_multiplier(policy: SimplexPolicy, rewards, gamma: float) -> float:
    """Solve ``sum_y pi_y sign(r_y + lam) |r_y + lam|**(1+gamma) = 0`` for ``lam``.

    The left side is strictly increasing in ``lam``, so the root is unique.
    """
    r = np.asarray(rewards, dtype=np.float64)
    p = policy.probs

    def h(lam):
        a = r + lam
        return float(np.dot(p, np.sign(a) * np.abs(a) ** (1.0 + gamma)))

    lo, hi = -float(r.max()), -float(r.min())
    if lo == hi:
        return lo
    return brentq(h, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def self_consistent_ascent(policy: SimplexPolicy, rewards, gamma: float, eta: float = 1.0) -> AscentDirection:
    """Ascent whose metric advantage equals its own output advantage.

    Returns ``delta = eta * pi * sign(A) |A|**(1+gamma)`` with
    ``A = r + lam`` and ``lam`` chosen so the masses cancel. This is the
    same point as :func:`optimal_ascent_weighted` fed with ``A`` itself.
    """
    r = _check(policy, rewards, eta)
    lam = self_consistent_multiplier(policy, r, gamma)
    a = r + lam
    delta = eta * policy.probs * np.sign(a) * np.abs(a) ** (1.0 + gamma)
    return AscentDirection(delta, lam, eta, metric_weights(a, gamma))


def brute_force_ascent(
    policy: SimplexPolicy,
    rewards,
    weights,
    eta: float = 1.0,
    iterations: int = 10_000,
    tol: float = 1e-10,
) -> AscentDirection:
    """Maximize the local update QP numerically.

    Conjugate gradients on the zero-sum subspace (the projection is
    subtracting the mean), restarted every ``m`` steps and stopped when
    the sup-norm of the projected gradient falls below ``tol``.
    """
    r = _check(policy, rewards, eta)
    if policy.n > 64:
        raise PreconditionError("brute force oracle is limited to n <= 64")
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != r.size or np.any(w < 0):
        raise InputError("weights must be non-negative and match rewards")

    active = w > 0
    if not active.any():
        raise DegenerateError("all metric weights are zero")
    m = int(active.sum())
    delta = np.zeros_like(r)
    if m == 1:
        # the only free coordinate must carry zero mass
        return AscentDirection(delta, -float(r[active][0]), eta, w)

    ra = r[active]
    curv = 1.0 / (eta * w[active] * policy.probs[active])

    def proj(v):
        return v - v.mean()

    x = np.zeros(m)
    g = proj(ra - curv * x)
    p = g.copy()
    residual = float(np.max(np.abs(g)))
    it = 0
    while residual > tol:
        if it >= iterations:
            raise ConvergenceError(f"brute force ascent stalled at residual {residual:.3e}", residual, x)
        hp = curv * p
        denom = float(np.dot(p, hp))
        if denom <= 0:
            break
        alpha = float(np.dot(g, g)) / denom
        x = x + alpha * p
        g_new = proj(ra - curv * x)
        it += 1
        if it % m == 0:
            p = g_new.copy()
        else:
            p = g_new + (float(np.dot(g_new, g_new)) / float(np.dot(g, g))) * p
        g = g_new
        residual = float(np.max(np.abs(g)))

    x = proj(x)
    delta[active] = x
    # stationarity: r + lam = curv * x on active coordinates
    lam = float(np.mean(curv * x - ra))
    return AscentDirection(delta, lam, eta, w)


def kl_quadratic_check(policy: SimplexPolicy, direction) -> tuple[float, float]:
    """Exact ``KL(pi0 + delta || pi0)`` and its quadratic approximation."""
    d = np.asarray(getattr(direction, "delta", direction), dtype=np.float64)
    p = policy.probs
    if d.size != p.size:
        raise InputError("direction length must match policy")
    q = p + d
    if np.any(q <= 0):
        raise DomainError("perturbed policy leaves the open simplex")
    exact = float(np.sum(q * np.log1p(d / p)))
    quad = 0.5 * float(np.sum(d * d / p))
    return exact, quad


def policy_gradient_operator(probs, f, score_jacobian) -> np.ndarray:
    """``sum_y pi(y) f(y) grad log pi(y)`` by exact enumeration."""
    p = np.asarray(probs, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    J = np.asarray(score_jacobian, dtype=np.float64)
    if J.ndim != 2 or J.shape[0] != p.size or f.size != p.size:
        raise InputError(f"score jacobian {J.shape} incompatible with {p.size} outcomes")
    return (p * f) @ J


def baseline_invariance_check(policy: SimplexPolicy, f, b: float, score_jacobian=None) -> tuple[np.ndarray, np.ndarray]:
    """Policy gradients of ``f`` and ``f + b``; they agree for any constant ``b``."""
    J = softmax_score_jacobian(policy.probs) if score_jacobian is None else score_jacobian
    f = np.asarray(f, dtype=np.float64)
    g1 = policy_gradient_operator(policy.probs, f, J)
    g2 = policy_gradient_operator(policy.probs, f + b, J)
    return g1, g2
