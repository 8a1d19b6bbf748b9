"""Standard-deviation bias and the miscalibrated GRPO estimator.

Closed forms for the Gaussian sample std and for the expected
standardized advantage over a histogram reward model, each paired with a
seeded Monte-Carlo counterpart.

Monte-Carlo trials are drawn in fixed-size chunks; chunk ``k`` gets its
own generator spawned from ``SeedSequence(seed)``, so a result depends
only on ``(seed, trials)`` and not on how chunks are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import DegenerateError, InputError, PreconditionError

CHUNK = 20_000
Z95 = 1.959963984540054


@dataclass(frozen=True)
class HistogramRewardModel:
    """Discrete reward histogram.

    ``point_rewards[j]`` is the reward of the scored output when its
    reward falls into bin ``j``; ``bin_means[j]`` is the expected reward
    of the other outputs in that bin and ``bin_spreads[j]`` their std.
    """

    masses: np.ndarray
    bin_means: np.ndarray
    bin_spreads: np.ndarray
    point_rewards: np.ndarray

    def __post_init__(self):
        arrs = {}
        for name in ("masses", "bin_means", "bin_spreads", "point_rewards"):
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(a)):
                raise InputError(f"{name} must be finite")
            a.setflags(write=False)
            arrs[name] = a
            object.__setattr__(self, name, a)
        n = arrs["masses"].size
        if n < 1:
            raise PreconditionError("histogram needs at least one bin")
        if any(a.size != n for a in arrs.values()):
            raise InputError("masses, bin_means, bin_spreads and point_rewards must have equal length")
        if np.any(arrs["masses"] < 0) or abs(arrs["masses"].sum() - 1.0) > 1e-12:
            raise InputError("masses must be non-negative and sum to 1")
        if np.any(arrs["bin_spreads"] < 0):
            raise InputError("bin_spreads must be >= 0")

    @property
    def n(self) -> int:
        return int(self.masses.size)

    @property
    def gaps(self) -> np.ndarray:
        return self.point_rewards - self.bin_means


@dataclass(frozen=True)
class BiasReport:
    G: int
    estimate: float
    exact: float
    rel_bias: float
    ci_halfwidth: float
    trials: int = 0

    @property
    def brackets_exact(self) -> bool:
        return abs(self.estimate - self.exact) <= self.ci_halfwidth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["brackets_exact"] = self.brackets_exact
        return d


def _chunks(trials: int, seed: int) -> Iterator[tuple[int, np.random.Generator]]:
    n_chunks = -(-trials // CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    for k, child in enumerate(children):
        size = min(CHUNK, trials - k * CHUNK)
        yield size, np.random.default_rng(child)


def _mean_and_ci(draw: Callable[[int, np.random.Generator], np.ndarray], trials: int, seed: int):
    # streaming sums keep memory bounded at 10^6+ trials
    total = 0.0
    total_sq = 0.0
    for size, rng in _chunks(trials, seed):
        x = draw(size, rng)
        total += float(x.sum())
        total_sq += float(np.dot(x, x))
    mean = total / trials
    var = max(total_sq / trials - mean * mean, 0.0) * trials / max(trials - 1, 1)
    return mean, Z95 * math.sqrt(var / trials)


def exact_std_bias_gaussian(G: int, sigma: float = 1.0) -> float:
    """E[s_G] for a Gaussian sample of size G (sample std, divisor G-1)."""
    if G < 2:
        raise PreconditionError(f"G must be >= 2, got {G}")
    if not sigma > 0:
        raise PreconditionError(f"sigma must be > 0, got {sigma}")
    log_ratio = gammaln(G / 2.0) - gammaln((G - 1) / 2.0)
    return sigma * math.sqrt(2.0 / (G - 1)) * math.exp(log_ratio)


def relative_std_bias(G: int) -> float:
    return exact_std_bias_gaussian(G, 1.0) - 1.0


def monte_carlo_std_bias(G: int, sigma: float = 1.0, trials: int = 100_000, seed: int = 0) -> BiasReport:
    if trials < 1000:
        raise PreconditionError(f"trials must be >= 1000, got {trials}")
    exact = exact_std_bias_gaussian(G, sigma)

    def draw(size, rng):
        return sigma * np.std(rng.standard_normal((size, G)), axis=1, ddof=1)

    est, ci = _mean_and_ci(draw, trials, seed)
    return BiasReport(G=G, estimate=est, exact=exact, rel_bias=(est - sigma) / sigma, ci_halfwidth=ci, trials=trials)


def true_advantage(model: HistogramRewardModel) -> float:
    return float(np.dot(model.masses, model.gaps))


def expected_standardized_advantage(model: HistogramRewardModel, G: int, epsilon: float = 1e-8) -> float:
    """Closed-form expectation of the std-normalized advantage.

    Each bin's gap is weighted by ``1 / (spread + epsilon)`` and the sum
    is shrunk by ``(G - 1) / G``.
    """
    denom = model.bin_spreads + epsilon
    if np.any(denom == 0):
        raise DegenerateError("a bin has zero spread and epsilon=0")
    return (G - 1) / G * float(np.sum(model.masses * model.gaps / denom))


def miscalibration_simulation(
    model: HistogramRewardModel,
    G: int,
    epsilon: float = 1e-8,
    trials: int = 100_000,
    seed: int = 0,
) -> BiasReport:
    """Monte-Carlo mean of the first sample's std-normalized advantage.

    Per trial a bin ``j`` is drawn from the masses; the scored sample's
    reward is ``point_rewards[j]`` plus Gaussian noise of std
    ``bin_spreads[j]``, the remaining ``G - 1`` rewards are centred on
    ``bin_means[j]`` with the same spread. The advantage uses the
    population std, as in :func:`slaslab.advantage.std_grpo_advantage`.
    """
    if trials < 10_000:
        raise PreconditionError(f"trials must be >= 1e4, got {trials}")
    if G < 8:
        raise PreconditionError(f"G must be >= 8, got {G}")
    exact = expected_standardized_advantage(model, G, epsilon) if epsilon > 0 or np.all(model.bin_spreads > 0) else float("nan")

    def draw(size, rng):
        bins = rng.choice(model.n, size=size, p=model.masses)
        centre = np.repeat(model.bin_means[bins][:, None], G, axis=1)
        centre[:, 0] = model.point_rewards[bins]
        r = centre + model.bin_spreads[bins][:, None] * rng.standard_normal((size, G))
        dev = r[:, 0] - r.mean(axis=1)
        return dev / (r.std(axis=1) + epsilon)

    est, ci = _mean_and_ci(draw, trials, seed)
    ta = true_advantage(model)
    rel = (est - ta) / abs(ta) if ta != 0 else float("nan")
    return BiasReport(G=G, estimate=est, exact=exact, rel_bias=rel, ci_halfwidth=ci, trials=trials)


def std_bias_table(groups: Sequence[int], sigma: float = 1.0) -> list[tuple[int, float]]:
    return [(G, exact_std_bias_gaussian(G, sigma) / sigma - 1.0) for G in groups]
