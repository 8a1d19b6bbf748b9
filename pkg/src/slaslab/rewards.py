"""Synthetic proxy/true reward pair with an exploitable axis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class SyntheticReward:
    """Proxy ``s_p * (-||y - mu*||^2) + beta * y_1 + noise``; true ``-||y - mu*||^2``.

    ``sensitivities`` sets ``s_p`` per prompt (cycled by prompt index):
    prompts with a small ``s_p`` yield groups whose rewards barely move
    except along the spurious first axis. Noise for a group is drawn from
    a generator seeded by the prompt, so it is shared by construction
    within the group's seed stream and reproducible.
    """

    true_center: np.ndarray
    hack_coeff: float = 0.0
    noise_std: float = 0.0
    clip_range: tuple[float, float] | None = None
    sensitivities: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        mu = np.asarray(self.true_center, dtype=np.float64).reshape(-1)
        if mu.size < 1 or not np.all(np.isfinite(mu)):
            raise InputError("true_center must be a finite vector")
        mu.setflags(write=False)
        object.__setattr__(self, "true_center", mu)
        if not (np.isfinite(self.noise_std) and self.noise_std >= 0):
            raise InputError(f"noise_std must be >= 0, got {self.noise_std}")
        if not np.isfinite(self.hack_coeff):
            raise InputError("hack_coeff must be finite")
        s = tuple(float(v) for v in self.sensitivities)
        if not s or any(not np.isfinite(v) or v < 0 for v in s):
            raise InputError("sensitivities must be a non-empty list of reals >= 0")
        object.__setattr__(self, "sensitivities", s)
        if self.clip_range is not None:
            lo, hi = (float(v) for v in self.clip_range)
            if not lo < hi:
                raise InputError(f"clip_range needs lo < hi, got {self.clip_range}")
            object.__setattr__(self, "clip_range", (lo, hi))

    @property
    def dim(self) -> int:
        return int(self.true_center.size)

    def sensitivity(self, prompt_index: int) -> float:
        return self.sensitivities[prompt_index % len(self.sensitivities)]

    def true_reward(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        diff = y - self.true_center
        return -np.sum(diff * diff, axis=-1)

    def expected_true_reward(self, mean, cov) -> float:
        """``E[-||y - mu*||^2]`` for ``y ~ N(mean, cov)``."""
        diff = np.asarray(mean) - self.true_center
        return -float(diff @ diff) - float(np.trace(cov))

    def proxy_reward(self, y, prompt_index: int = 0, seed: int = 0) -> np.ndarray:
        """Proxy scores for a group ``y`` of shape (G, d)."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if y.shape[1] != self.dim:
            raise InputError(f"samples have dimension {y.shape[1]}, reward expects {self.dim}")
        r = self.sensitivity(prompt_index) * self.true_reward(y) + self.hack_coeff * y[:, 0]
        if self.noise_std > 0:
            rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(seed) >> 32, int(prompt_index), 7])
            r = r + self.noise_std * rng.standard_normal(y.shape[0])
        if self.clip_range is not None:
            r = np.clip(r, *self.clip_range)
        return r

    def to_dict(self) -> dict:
        return {
            "true_center": self.true_center.tolist(),
            "hack_coeff": self.hack_coeff,
            "noise_std": self.noise_std,
            "clip_range": None if self.clip_range is None else list(self.clip_range),
            "sensitivities": list(self.sensitivities),
        }
