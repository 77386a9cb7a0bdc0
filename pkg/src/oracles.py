"""
Analytic predictors with the same surface as a network:
``mode``, ``variance_mode``, ``data_dim`` and ``predict(x_t, t)``.

They have no trainable parameters; objectives and the sampler treat them
exactly like DenoiserParams, which is what makes them usable as oracles.
"""
import numpy as np

import datasets
import denoiser
from denoiser import NOISING_VARIANCE, POSTERIOR_VARIANCE, PREDICT_EPS, PREDICT_X0, check_modes
from errors import ConfigError
from forward import as_batch


class _Predictor:
    kind = "oracle"

    def __init__(self, schedule, data_dim, mode, variance_mode):
        check_modes(mode, variance_mode)
        self.schedule = schedule
        self.data_dim = data_dim
        self.mode = mode
        self.variance_mode = variance_mode

    def _x0_to_mode(self, x_t, x0_hat, t):
        if self.mode == PREDICT_X0:
            return x0_hat
        s = self.schedule
        return (x_t - s.signal(t) * x0_hat) / np.sqrt(s.noise_var(t))


class MixtureOracle(_Predictor):
    """E[x_0 | x_t] (or E[eps | x_t]) for an analytic DataSpec."""

    def __init__(self, spec, schedule, mode=PREDICT_EPS, variance_mode=NOISING_VARIANCE):
        super().__init__(schedule, spec.dim, mode, variance_mode)
        self.spec = spec

    def predict(self, x_t, t):
        x_t = as_batch(x_t, "x_t")
        if self.mode == PREDICT_EPS:
            return datasets.optimal_epsilon(self.spec, self.schedule, t, x_t)
        return datasets.optimal_x0(self.spec, self.schedule, t, x_t)

    def to_dict(self):
        return {"kind": "mixture_oracle", "mode": self.mode, "variance_mode": self.variance_mode}


class UnitGaussianOracle(_Predictor):
    """
    Reversibility oracle for standard-normal data: x0_hat = Lambda_t x_t, which
    gives mu = lambda_t x_t and, with noising variance, the exact reverse chain.
    """

    def __init__(self, schedule, data_dim=1, mode=PREDICT_X0, variance_mode=NOISING_VARIANCE):
        super().__init__(schedule, data_dim, mode, variance_mode)

    def predict(self, x_t, t):
        x_t = as_batch(x_t, "x_t")
        return self._x0_to_mode(x_t, self.schedule.signal(t) * x_t, t)

    def to_dict(self):
        return {"kind": "unit_gaussian_oracle", "mode": self.mode, "variance_mode": self.variance_mode}


class LinearPredictor(_Predictor):
    """x0_hat = slope_t * x_t with one slope per level."""

    def __init__(self, schedule, slopes, data_dim=1, variance_mode=NOISING_VARIANCE):
        super().__init__(schedule, data_dim, PREDICT_X0, variance_mode)
        self.slopes = np.asarray(slopes, dtype=np.float64).reshape(-1)
        if self.slopes.size != schedule.T:
            raise ConfigError(f"Need {schedule.T} slopes, got {self.slopes.size}")

    def predict(self, x_t, t):
        return self.slopes[self.schedule.check_level(t) - 1] * as_batch(x_t, "x_t")

    def mean_slopes(self):
        """m_t in mu_theta(x_t) = m_t x_t."""
        from forward import posterior_coefficients

        out = []
        for t in range(1, self.schedule.T + 1):
            coeffs = posterior_coefficients(self.schedule, t)
            out.append(coeffs.a * self.slopes[t - 1] + coeffs.b)
        return np.array(out)

    def variances(self):
        from forward import posterior_coefficients

        return np.array([
            denoiser.variance_for_level(posterior_coefficients(self.schedule, t), self.schedule, t, self.variance_mode)
            for t in range(1, self.schedule.T + 1)
        ])

    def to_dict(self):
        return {"kind": "linear", "slopes": self.slopes.tolist(), "variance_mode": self.variance_mode}


class ZeroPredictor(_Predictor):
    def predict(self, x_t, t):
        return np.zeros_like(as_batch(x_t, "x_t"))

    def to_dict(self):
        return {"kind": "zero", "mode": self.mode, "variance_mode": self.variance_mode}


def from_dict(payload, spec, schedule):
    """Build a predictor from a checkpoint ``model`` entry."""
    kind = payload.get("kind")
    mode = payload.get("mode", PREDICT_X0)
    variance_mode = payload.get("variance_mode", NOISING_VARIANCE)
    if kind == "network":
        return denoiser.from_dict(payload)
    if kind == "mixture_oracle":
        return MixtureOracle(spec, schedule, mode, variance_mode)
    if kind == "unit_gaussian_oracle":
        return UnitGaussianOracle(schedule, spec.dim, mode, variance_mode)
    if kind == "linear":
        return LinearPredictor(schedule, payload["slopes"], spec.dim, variance_mode)
    if kind == "zero":
        return ZeroPredictor(schedule, spec.dim, mode, variance_mode)
    raise ConfigError(f"Unknown model kind {kind!r}")


__all__ = [
    "MixtureOracle",
    "UnitGaussianOracle",
    "LinearPredictor",
    "ZeroPredictor",
    "from_dict",
    "POSTERIOR_VARIANCE",
]
