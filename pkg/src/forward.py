"""
The noising process and its closed-form conditionals.

All sampling draws from an explicitly passed numpy Generator. The optional
``noise`` arguments replace the draw with a fixed array, which the tests
use to pin the examples to hand-computed values.
"""
import math
from dataclasses import dataclass

import numpy as np

from errors import NonFiniteError, ShapeMismatchError


@dataclass(frozen=True)
class PosteriorCoefficients:
    """q(x_{t-1} | x_0, x_t) = N(a x_0 + b x_t, var) plus x_t = c x_0 + d eps."""

    t: int
    a: float
    b: float
    var: float
    c: float
    d: float

    def mean(self, x0, x_t):
        return self.a * x0 + self.b * x_t


def as_batch(x, name="x"):
    """Coerce to a finite (n, D) float array; 1-D input becomes one column."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1)
    elif x.ndim != 2:
        raise ShapeMismatchError(f"{name} must be (n, D), got shape {x.shape}")
    if x.shape[1] < 1:
        raise ShapeMismatchError(f"{name} needs at least one column")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return x


def _noise(rng, shape, noise):
    if noise is None:
        return rng.standard_normal(shape)
    noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), shape)
    return np.array(noise)


def noise_step(s, t, x_prev, rng, noise=None):
    """One step of the variance-preserving AR(1) chain, level t-1 -> t."""
    t = s.check_level(t)
    x_prev = as_batch(x_prev, "x_prev")
    eps = _noise(rng, x_prev.shape, noise)
    return s.lam(t) * x_prev + math.sqrt(s.noising_var(t)) * eps


def conditional_on_data(s, t, x0, rng, noise=None):
    """Sample q(x_t | x_0) in one shot; returns (x_t, eps)."""
    t = s.check_level(t)
    x0 = as_batch(x0, "x0")
    eps = _noise(rng, x0.shape, noise)
    return s.signal(t) * x0 + math.sqrt(s.noise_var(t)) * eps, eps


def sample_trajectory(s, x0, rng):
    """The full forward chain [x_0, x_1, ..., x_T] from repeated noise_step calls."""
    chain = [as_batch(x0, "x0")]
    for t in range(1, s.T + 1):
        chain.append(noise_step(s, t, chain[-1], rng))
    return chain


def posterior_coefficients(s, t):
    """
    Coefficients of q(x_{t-1} | x_0, x_t).

    The formulas use Lambda_0 = 1, which makes t = 1 the point mass on x_0:
    a = 1, b = 0, var = 0.
    """
    t = s.check_level(t)
    if t == 1:
        return PosteriorCoefficients(t=1, a=1.0, b=0.0, var=0.0, c=s.signal(1), d=math.sqrt(s.noise_var(1)))
    sigma2 = s.noising_var(t)
    prev_noise = s.noise_var(t - 1)
    noise = s.noise_var(t)
    return PosteriorCoefficients(
        t=t,
        a=s.signal(t - 1) * sigma2 / noise,
        b=prev_noise * s.lam(t) / noise,
        var=prev_noise * sigma2 / noise,
        c=s.signal(t),
        d=math.sqrt(noise),
    )


def posterior_sample(coeffs, x0, x_t, rng, noise=None):
    x0 = as_batch(x0, "x0")
    x_t = as_batch(x_t, "x_t")
    if x0.shape != x_t.shape:
        raise ShapeMismatchError(f"x0 shape {x0.shape} does not match x_t shape {x_t.shape}")
    mean = coeffs.mean(x0, x_t)
    if coeffs.var == 0.0:
        return mean
    return mean + math.sqrt(coeffs.var) * _noise(rng, x0.shape, noise)


def joint_covariance(s, levels=None):
    """
    Covariance of (x_0, x_1, ..., x_T) for unit-variance data.

    Cov(x_i, x_j) = Lambda_j / Lambda_i for i <= j. Used as the exact
    conditioning oracle for the posterior coefficients.
    """
    levels = list(range(s.T + 1)) if levels is None else list(levels)
    signal = np.array([s.signal(t) for t in levels])
    lo = np.minimum.outer(levels, levels)
    hi = np.maximum.outer(levels, levels)
    index = {t: i for i, t in enumerate(levels)}
    cov = np.empty((len(levels), len(levels)))
    for i in range(len(levels)):
        for j in range(len(levels)):
            cov[i, j] = signal[index[hi[i, j]]] / signal[index[lo[i, j]]]
    return cov
