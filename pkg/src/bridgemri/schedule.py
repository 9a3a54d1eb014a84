"""Discrete Brownian-bridge schedule between paired images.

The bridge runs over t = 0..T with pinned endpoints: state 0 is the
target image x0 and state T is the conditioning image y0.  Marginals are

    q(x_t | x0, y0) = N((1 - m_t) x0 + m_t y0, sigma_t I)
    m_t = t / T,  sigma_t = 2 (m_t - m_t^2)

so the variance is exactly zero at both endpoints.  Reverse-time
sampling uses the Gaussian conditional of x_{t-1} given x_t and the
endpoints, with the unknown x0 replaced by a network estimate.  All
schedule quantities are precomputed float64 tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class BridgeSchedule:
    """Lookup tables indexed by t.

    m and sigma cover t = 0..steps.  sigma_step holds the transition
    variance sigma_{t|t-1} and sigma_tilde the reverse posterior
    variance sigma~_t, both meaningful for t = 1..steps with the unused
    t = 0 slot fixed at zero.
    """

    steps: int
    m: np.ndarray
    sigma: np.ndarray
    sigma_step: np.ndarray
    sigma_tilde: np.ndarray

    def marginal(self, t: int) -> tuple[float, float]:
        """(m_t, sigma_t) for t in 0..steps."""
        self._check_t(t, low=0, high=self.steps)
        return float(self.m[t]), float(self.sigma[t])

    def transition_var(self, t: int) -> float:
        """Variance of x_t given x_{t-1} and the endpoints, t in 1..steps."""
        self._check_t(t, low=1, high=self.steps)
        return float(self.sigma_step[t])

    def posterior_var(self, t: int) -> float:
        """Variance of x_{t-1} given x_t and the endpoints, t in 1..steps.

        The t = steps entry is the t-1 marginal variance: conditioning
        on x_T = y0 is degenerate, so the first reverse step draws from
        the marginal around the x0 estimate instead.
        """
        self._check_t(t, low=1, high=self.steps)
        return float(self.sigma_tilde[t])

    def reverse_coeffs(self, t: int) -> tuple[float, float, float, float]:
        """(a_t, b_t, w_x, w_prior) for the interior reverse mean, t in 1..steps-1.

        The mean is w_x (x_t - b_t y0) + w_prior ((1 - m_{t-1}) x0 + m_{t-1} y0)
        and the weights satisfy w_x a_t + w_prior = 1.
        """
        self._check_t(t, low=1, high=self.steps - 1)
        a = float((1.0 - self.m[t]) / (1.0 - self.m[t - 1]))
        b = float(self.m[t]) - float(self.m[t - 1]) * a
        w_x = a * float(self.sigma[t - 1] / self.sigma[t])
        w_prior = float(self.sigma_step[t] / self.sigma[t])
        return a, b, w_x, w_prior

    def _check_t(self, t: int, low: int, high: int) -> None:
        if not isinstance(t, (int, np.integer)):
            raise TypeError(f"step index must be an int, got {type(t).__name__}")
        if not low <= t <= high:
            raise ValueError(f"step index {t} outside [{low}, {high}]")


def make_schedule(steps: int) -> BridgeSchedule:
    if steps < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got {steps}")
    t = np.arange(steps + 1, dtype=np.float64)
    m = t / steps
    sigma = 2.0 * (m - m * m)
    sigma_step = np.zeros(steps + 1)
    sigma_tilde = np.zeros(steps + 1)
    for k in range(1, steps + 1):
        shrink = (1.0 - m[k]) / (1.0 - m[k - 1])
        sigma_step[k] = sigma[k] - sigma[k - 1] * shrink * shrink
        if k < steps:
            sigma_tilde[k] = sigma_step[k] * sigma[k - 1] / sigma[k]
        else:
            sigma_tilde[k] = sigma[k - 1]
    return BridgeSchedule(steps=steps, m=m, sigma=sigma,
                          sigma_step=sigma_step, sigma_tilde=sigma_tilde)


def _check_like(name: str, arr: np.ndarray, ref: np.ndarray) -> None:
    if arr.shape != ref.shape:
        raise ShapeError(f"{name} shape {arr.shape} does not match {ref.shape}")


def forward_sample(sched: BridgeSchedule, t: int, x0: np.ndarray, y0: np.ndarray,
                   eps: np.ndarray) -> np.ndarray:
    """Draw x_t = (1 - m_t) x0 + m_t y0 + sqrt(sigma_t) eps."""
    m, sigma = sched.marginal(t)
    _check_like("y0", y0, x0)
    _check_like("eps", eps, x0)
    return (1.0 - m) * x0 + m * y0 + float(np.sqrt(sigma)) * eps


def epsilon_target(sched: BridgeSchedule, t: int, x0: np.ndarray, y0: np.ndarray,
                   eps: np.ndarray) -> np.ndarray:
    """Network regression target m_t (y0 - x0) + sqrt(sigma_t) eps.

    Subtracting this from the forward sample x_t returns x0 exactly,
    which is how the estimate x0_hat = x_t - eps_hat is formed.
    """
    m, sigma = sched.marginal(t)
    _check_like("y0", y0, x0)
    _check_like("eps", eps, x0)
    return m * (y0 - x0) + float(np.sqrt(sigma)) * eps


def reverse_step(sched: BridgeSchedule, t: int, x_t: np.ndarray, x0_hat: np.ndarray,
                 y0: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """One reverse draw x_{t-1} given x_t, the x0 estimate and y0.

    t = steps replaces the degenerate conditional with the t-1 marginal
    around x0_hat; t = 1 is deterministic and returns x0_hat exactly.
    """
    sched._check_t(t, low=1, high=sched.steps)
    _check_like("x0_hat", x0_hat, x_t)
    _check_like("y0", y0, x_t)
    _check_like("noise", noise, x_t)
    m_prev = float(sched.m[t - 1])
    if t == sched.steps:
        mean = (1.0 - m_prev) * x0_hat + m_prev * y0
    elif t == 1:
        mean = x0_hat.copy()
    else:
        _, b, w_x, w_prior = sched.reverse_coeffs(t)
        mean = w_x * (x_t - b * y0) + w_prior * ((1.0 - m_prev) * x0_hat + m_prev * y0)
    std = float(np.sqrt(sched.posterior_var(t)))
    if std > 0.0:
        mean = mean + std * noise
    return mean
