"""Toy flow-matching policy sampled with the stochastic (SDE) sampler.

Time runs from ``t = 1`` (noise) to ``t = 0`` (data) on the uniform grid
``t_k = 1 - k/T``, ``k = 0..T-1``; each step moves ``dt = 1/T`` toward
data, so the signed increment in the Euler-Maruyama update is ``-dt``.
The drift is evaluated only at grid times, the smallest being ``1/T``.

The velocity field is affine, ``v(x, t_k) = W x + b_k``, with ``W``
shared over steps and one bias per step. Every transition is Gaussian
with mean linear in the parameters, so log-densities and their
parameter gradients are available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateError, DomainError, InputError, PreconditionError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SigmaSchedule:
    """Noise level ``sigma_t``.

    ``constant``: ``scale`` everywhere. ``power``:
    ``min(cap, scale * sqrt(t / (1 - t + delta)))``.
    """

    kind: str = "constant"
    scale: float = 0.5
    delta: float = 1e-3
    cap: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "power"):
            raise InputError(f"unknown sigma schedule {self.kind!r}")
        if not (np.isfinite(self.scale) and self.scale >= 0):
            raise InputError("sigma scale must be finite and >= 0")

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return float(self.scale)
        return float(min(self.cap, self.scale * math.sqrt(t / (1.0 - t + self.delta))))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale, "delta": self.delta, "cap": self.cap}


@dataclass(frozen=True)
class FlowPolicy:
    weight: np.ndarray
    bias: np.ndarray
    sigma: SigmaSchedule = field(default_factory=SigmaSchedule)

    def __post_init__(self):
        W = np.array(self.weight, dtype=np.float64)
        B = np.array(self.bias, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise InputError(f"weight must be square, got shape {W.shape}")
        if B.ndim != 2 or B.shape[1] != W.shape[0] or B.shape[0] < 1:
            raise InputError(f"bias must have shape (T, {W.shape[0]}), got {B.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(B))):
            raise InputError("policy parameters must be finite")
        W.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "weight", W)
        object.__setattr__(self, "bias", B)

    @classmethod
    def gaussian_init(cls, dim: int, steps: int, mean=None, weight=None, sigma: SigmaSchedule | None = None) -> "FlowPolicy":
        """Field ``v(x, t) = W (x - (1-t) mu) - mu`` transporting N(0, I) toward mean ``mu``.

        With this bias the correction term of the SDE drift vanishes in
        expectation along the mean path, so the sampler keeps the ODE's
        endpoint mean exactly.
        """
        mu = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64).reshape(dim)
        W = np.zeros((dim, dim)) if weight is None else np.asarray(weight, dtype=np.float64)
        t = 1.0 - np.arange(steps) / steps
        B = -mu[None, :] - ((1.0 - t)[:, None] * mu[None, :]) @ W.T
        return cls(W, B, sigma or SigmaSchedule())

    @property
    def dim(self) -> int:
        return int(self.weight.shape[0])

    @property
    def steps(self) -> int:
        return int(self.bias.shape[0])

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def times(self) -> np.ndarray:
        return 1.0 - np.arange(self.steps) / self.steps

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias.ravel()])

    def with_theta(self, theta) -> "FlowPolicy":
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if theta.size != self.n_params:
            raise InputError(f"expected {self.n_params} parameters, got {theta.size}")
        d = self.dim
        W = theta[: d * d].reshape(d, d)
        B = theta[d * d :].reshape(self.steps, d)
        return replace(self, weight=W, bias=B)

    def step_index(self, t: float) -> int:
        if not t > 0:
            raise DomainError(f"drift is singular at t={t}; need t > 0")
        if t > 1.0 + 1e-12:
            raise DomainError(f"t={t} is outside (0, 1]")
        return int(min(self.steps - 1, max(0, round((1.0 - t) * self.steps))))

    def sigmas(self) -> np.ndarray:
        return np.array([self.sigma(t) for t in self.times])


def velocity(policy: FlowPolicy, x, k: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ policy.weight.T + policy.bias[k]


def _drift_at(policy: FlowPolicy, x, k: int, t: float, sig: float) -> np.ndarray:
    v = velocity(policy, x, k)
    return v + (sig * sig / (2.0 * t)) * (x + (1.0 - t) * v)


def sde_drift(policy: FlowPolicy, x, t: float) -> np.ndarray:
    """``v + sigma_t^2 / (2t) * (x + (1 - t) v)`` at time ``t``."""
    k = policy.step_index(t)
    return _drift_at(policy, x, k, t, policy.sigma(t))


def _gauss_logpdf(x_next, mean, std) -> np.ndarray:
    z = (x_next - mean) / std
    d = z.shape[-1]
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * d * (LOG_2PI + 2.0 * math.log(std))


def _step(policy: FlowPolicy, x, k: int, noise):
    t = float(policy.times[k])
    sig = policy.sigma(t)
    dt = policy.dt
    mean = x + _drift_at(policy, x, k, t, sig) * (-dt)
    std = sig * math.sqrt(dt)
    return mean + std * noise, mean, std


def euler_maruyama_step(policy: FlowPolicy, x, t: float, noise, with_logprob: bool = True):
    """One sampler step from time ``t`` toward data.

    Returns ``(x_next, logprob)``; ``logprob`` is the Gaussian
    log-density of ``x_next`` under the transition and is ``None`` when
    ``with_logprob`` is false.
    """
    k = policy.step_index(t)
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    x_next, mean, std = _step(policy, x, k, noise)
    if not with_logprob:
        return x_next, None
    if std == 0.0:
        raise DegenerateError("transition density is degenerate when sigma_t = 0")
    return x_next, float(_gauss_logpdf(x_next, mean, std))


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (T+1, d); states[k] is the state at t_k, states[T] at t=0
    noises: np.ndarray  # (T, d)
    logprob_terms: np.ndarray  # (T,), NaN where sigma_t = 0

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    def to_dict(self) -> dict:
        return {
            "states": self.states.tolist(),
            "noises": self.noises.tolist(),
            "logprob_terms": [None if not np.isfinite(v) else float(v) for v in self.logprob_terms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        lp = np.array([np.nan if v is None else v for v in d["logprob_terms"]], dtype=np.float64)
        return cls(np.asarray(d["states"], dtype=np.float64), np.asarray(d["noises"], dtype=np.float64), lp)


def sample_rng(prompt_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(prompt_seed) & 0xFFFFFFFF, int(prompt_seed) >> 32, int(index)])


def draw_noise(policy: FlowPolicy, prompt_seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Initial state and per-step noises for one sample, fixed by (seed, index)."""
    rng = sample_rng(prompt_seed, index)
    x1 = rng.standard_normal(policy.dim)
    eps = rng.standard_normal((policy.steps, policy.dim))
    return x1, eps


def integrate(policy: FlowPolicy, x1, noises) -> tuple[np.ndarray, np.ndarray]:
    """Run the sampler on a batch.

    ``x1`` has shape (N, d) and ``noises`` (N, T, d). Returns states
    (N, T+1, d) and log-density terms (N, T) (NaN where sigma_t = 0).
    """
    x = np.asarray(x1, dtype=np.float64)
    noises = np.asarray(noises, dtype=np.float64)
    n, T = x.shape[0], policy.steps
    states = np.empty((n, T + 1, policy.dim))
    logp = np.full((n, T), np.nan)
    states[:, 0] = x
    for k in range(T):
        x_next, mean, std = _step(policy, x, k, noises[:, k])
        if std > 0:
            logp[:, k] = _gauss_logpdf(x_next, mean, std)
        states[:, k + 1] = x_next
        x = x_next
    return states, logp


def rollout_group(policy: FlowPolicy, prompt_seed: int, group_size: int) -> list[Trajectory]:
    if group_size < 2:
        raise PreconditionError(f"group_size must be >= 2, got {group_size}")
    draws = [draw_noise(policy, prompt_seed, i) for i in range(group_size)]
    x1 = np.stack([d[0] for d in draws])
    eps = np.stack([d[1] for d in draws])
    states, logp = integrate(policy, x1, eps)
    return [Trajectory(states[i], eps[i], logp[i]) for i in range(group_size)]


def ode_euler(policy: FlowPolicy, x1) -> np.ndarray:
    """Deterministic Euler integration of ``dx = v dt`` from t=1 to t=0."""
    x = np.asarray(x1, dtype=np.float64)
    for k in range(policy.steps):
        x = x + (x @ policy.weight.T + policy.bias[k]) * (-policy.dt)
    return x


def transition_means(policy: FlowPolicy, states) -> tuple[np.ndarray, np.ndarray]:
    """Transition means (N, T, d) and stds (T,) at stored states (N, T+1, d)."""
    states = np.asarray(states, dtype=np.float64)
    T = policy.steps
    means = np.empty(states[:, :T].shape)
    stds = np.empty(T)
    for k in range(T):
        t = float(policy.times[k])
        sig = policy.sigma(t)
        means[:, k] = states[:, k] + _drift_at(policy, states[:, k], k, t, sig) * (-policy.dt)
        stds[k] = sig * math.sqrt(policy.dt)
    return means, stds


def batch_logprob(policy: FlowPolicy, states) -> np.ndarray:
    """Log-densities (N, T) of every stored transition under ``policy``."""
    states = np.asarray(states, dtype=np.float64)
    means, stds = transition_means(policy, states)
    if np.any(stds == 0):
        raise DegenerateError("transition density is degenerate when sigma_t = 0")
    z = (states[:, 1:] - means) / stds[None, :, None]
    d = policy.dim
    out = -0.5 * np.sum(z * z, axis=-1) - 0.5 * d * (LOG_2PI + 2.0 * np.log(stds))[None, :]
    if not np.all(np.isfinite(out)):
        raise DegenerateError("non-finite transition density")
    return out


def transition_logprob_under(policy: FlowPolicy, traj: Trajectory) -> np.ndarray:
    """Re-evaluate a stored trajectory's transitions under ``policy``."""
    if traj.states.shape != (policy.steps + 1, policy.dim):
        raise InputError("trajectory does not match the policy's steps/dimension")
    return batch_logprob(policy, traj.states[None])[0]


def mean_jacobian_coeffs(policy: FlowPolicy) -> np.ndarray:
    """Per-step scalar ``a_k`` with ``d mean_k / d v = a_k I``."""
    out = np.empty(policy.steps)
    for k, t in enumerate(policy.times):
        sig = policy.sigma(float(t))
        out[k] = -policy.dt * (1.0 + sig * sig / (2.0 * t) * (1.0 - t))
    return out


def pullback_mean_grad(policy: FlowPolicy, states, dmean) -> np.ndarray:
    """Chain a gradient w.r.t. transition means (N, T, d) back to ``theta``.

    Returns the sum over samples and steps as a flat parameter vector.
    """
    states = np.asarray(states, dtype=np.float64)
    a = mean_jacobian_coeffs(policy)
    gv = dmean * a[None, :, None]  # gradient w.r.t. the velocity at each step
    gW = np.einsum("ntd,nte->de", gv, states[:, :-1])
    gB = gv.sum(axis=0)
    return np.concatenate([gW.ravel(), gB.ravel()])


def logprob_grad(policy: FlowPolicy, states, step_weights) -> np.ndarray:
    """``sum_{n,k} step_weights[n,k] * grad_theta log p(x_{k+1} | x_k)``."""
    states = np.asarray(states, dtype=np.float64)
    means, stds = transition_means(policy, states)
    if np.any(stds == 0):
        raise DegenerateError("transition density is degenerate when sigma_t = 0")
    resid = (states[:, 1:] - means) / (stds**2)[None, :, None]
    return pullback_mean_grad(policy, states, resid * np.asarray(step_weights)[:, :, None])


def per_sample_scores(policy: FlowPolicy, states) -> np.ndarray:
    """Trajectory scores ``grad_theta sum_k log p`` for each sample, (N, P)."""
    states = np.asarray(states, dtype=np.float64)
    n = states.shape[0]
    means, stds = transition_means(policy, states)
    resid = (states[:, 1:] - means) / (stds**2)[None, :, None]
    gv = resid * mean_jacobian_coeffs(policy)[None, :, None]
    gW = np.einsum("ntd,nte->nde", gv, states[:, :-1]).reshape(n, -1)
    gB = gv.reshape(n, -1)
    return np.concatenate([gW, gB], axis=1)


def endpoint_moments(policy: FlowPolicy, x1_mean=None, x1_cov=None) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of the sampler's endpoint.

    Every step is affine in the state plus independent Gaussian noise, so
    the endpoint is Gaussian; its moments are propagated step by step.
    """
    d = policy.dim
    m = np.zeros(d) if x1_mean is None else np.asarray(x1_mean, dtype=np.float64)
    S = np.eye(d) if x1_cov is None else np.asarray(x1_cov, dtype=np.float64)
    eye = np.eye(d)
    a = mean_jacobian_coeffs(policy)
    for k, t in enumerate(policy.times):
        sig = policy.sigma(float(t))
        c = sig * sig / (2.0 * t)
        M = eye * (1.0 - policy.dt * c) + a[k] * policy.weight
        m = M @ m + a[k] * policy.bias[k]
        S = M @ S @ M.T + (sig * sig * policy.dt) * eye
    return m, S
