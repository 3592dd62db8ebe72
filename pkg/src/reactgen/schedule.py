"""Variance-preserving cosine noise schedule on a discrete grid.

Grid index 0 is the clean end (u = 0) and index T the noisiest (u = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ConfigError

COSINE_OFFSET = 0.008
ENDPOINT_FLOOR = 1e-4
TRAIN_LOG_NOISE_MEAN = -1.2
TRAIN_LOG_NOISE_STD = 1.2


def cosine_angle(u):
    """Angle theta(u) with alpha = cos(theta), sigma = sin(theta)."""
    return (np.asarray(u, dtype=float) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * (math.pi / 2)


def cosine_alpha_sigma(u):
    """Clipped (alpha, sigma) of the continuous cosine schedule at time ``u``."""
    theta = cosine_angle(u)
    alpha = np.maximum(np.cos(theta), ENDPOINT_FLOOR)
    sigma = np.sqrt(1.0 - alpha**2)
    sigma = np.maximum(sigma, ENDPOINT_FLOOR)
    alpha = np.sqrt(1.0 - sigma**2)
    return alpha, sigma


def log_snr(alpha, sigma):
    """log(alpha / sigma); both arguments must be positive."""
    a = np.asarray(alpha, dtype=float)
    s = np.asarray(sigma, dtype=float)
    if np.any(a <= 0) or np.any(s <= 0):
        raise ValueError("log_snr needs alpha > 0 and sigma > 0")
    out = np.log(a) - np.log(s)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    t_grid: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray

    @property
    def lambda_(self) -> np.ndarray:
        return self.lam

    def step_sizes(self) -> np.ndarray:
        """h_i = lambda_{t_i} - lambda_{t_{i-1}} along the denoising direction (T -> 0)."""
        rev = self.lam[::-1]
        return np.diff(rev)

    def denoising_indices(self) -> np.ndarray:
        """Schedule indices in solver order: t_0 = T (noisiest) ... t_T = 0."""
        return np.arange(self.T, -1, -1)

    def nearest_index(self, log_noise) -> np.ndarray:
        """Grid index whose log noise-to-signal ratio, -lambda, is nearest ``log_noise``."""
        log_noise = np.asarray(log_noise, dtype=float)
        d = np.abs(log_noise[..., None] + self.lam)
        return np.argmin(d, axis=-1)

    def sample_training_noise_level(self, rng: np.random.Generator, size=None,
                                    loc: float = TRAIN_LOG_NOISE_MEAN, scale: float = TRAIN_LOG_NOISE_STD):
        """Draw log sigma/alpha from N(loc, scale^2) and snap to the nearest grid index.

        Returns ``(t_index, sigma_t)``; arrays when ``size`` is given.
        """
        z = rng.standard_normal(size)
        idx = self.nearest_index(loc + scale * z)
        if size is None:
            idx = int(idx)
        return idx, self.sigma[idx]

    def to_csv(self) -> str:
        lines = ["i,alpha,sigma,lambda"]
        for i in range(self.T + 1):
            lines.append(f"{i},{self.alpha[i]:.17g},{self.sigma[i]:.17g},{self.lam[i]:.17g}")
        return "\n".join(lines) + "\n"


def build_cosine_schedule(T: int) -> NoiseSchedule:
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    u = np.linspace(0.0, 1.0, T + 1)
    alpha, sigma = cosine_alpha_sigma(u)
    lam = np.log(alpha) - np.log(sigma)
    for arr in (u, alpha, sigma, lam):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, t_grid=u, alpha=alpha, sigma=sigma, lam=lam)


def sample_training_noise_level(schedule: NoiseSchedule, rng: np.random.Generator, **kwargs):
    return schedule.sample_training_noise_level(rng, **kwargs)
