"""Continuous-time variance-preserving noise schedule on t in [0, 1]."""

from dataclasses import dataclass

import numpy as np

# Training and extraction draw diffusion times from this interval.
T_RANGE = (0.02, 0.98)


def _check_t(t, lo=0.0):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < lo) or np.any(t > 1.0):
        raise ValueError(f"diffusion time must lie in [{lo}, 1], got {t}")
    return t


@dataclass(frozen=True)
class VPSchedule:
    """Linear-beta VP-SDE: ``log alpha_t = -t^2 (b1 - b0) / 4 - t b0 / 2``."""

    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if not 0 < self.beta_min < self.beta_max:
            raise ValueError(f"need 0 < beta_min < beta_max, got {self.beta_min}, {self.beta_max}")

    def log_alpha(self, t):
        t = _check_t(t)
        return -0.25 * t**2 * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min

    def alpha_sigma(self, t):
        la = self.log_alpha(t)
        # expm1 keeps sigma accurate near t = 0
        return np.exp(la), np.sqrt(-np.expm1(2.0 * la))

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def drift_diffusion(self, t):
        """``(f(t), g(t)^2)`` with ``f = d log alpha / dt`` and ``g^2 = -2 f`` for VP."""
        t = _check_t(t)
        b = self.beta(t)
        return -0.5 * b, b

    def perturb(self, a0, t, noise):
        alpha, sigma = self.alpha_sigma(t)
        a0 = np.asarray(a0, dtype=np.float64)
        noise = np.asarray(noise, dtype=np.float64)
        if not np.all(np.isfinite(noise)):
            raise ValueError("noise must be finite")
        if np.ndim(alpha) == 1 and a0.ndim == 2:
            alpha, sigma = alpha[:, None], sigma[:, None]
        return alpha * a0 + sigma * noise

    def to_dict(self):
        return {"beta_min": self.beta_min, "beta_max": self.beta_max}
