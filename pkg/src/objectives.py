"""
Training objectives.

Every function takes a ``model`` with ``mode``, ``variance_mode`` and
``predict(x_t, t)``: a DenoiserParams, a TrackedDenoiser recorded on a
GradientTape, or one of the analytic predictors in ``oracles``. Arithmetic
goes through the ``autodiff`` helpers so the same code yields a float for
plain models and a differentiable Node for tracked ones.

All values are quantities to minimise. The maximised log-likelihood form is
only ever recovered through ``LossEstimate.maximised``.
"""
import math
from dataclasses import dataclass, field

import numpy as np

import denoiser
from autodiff import average, square, total, value_of
from denoiser import POSTERIOR_VARIANCE, PREDICT_EPS, PREDICT_X0
from errors import ConfigError, ModeMismatchError, NonFiniteError
from forward import as_batch, conditional_on_data, noise_step, posterior_coefficients, sample_trajectory

NAIVE = "naive"
RAO_BLACKWELL = "rao_blackwell"
SIMPLIFIED_DDPM = "simplified_ddpm"
VDM = "vdm"
ELBO = "elbo"
VARIANTS = (NAIVE, RAO_BLACKWELL, SIMPLIFIED_DDPM, VDM, ELBO)

UNIFORM = "uniform"
WEIGHTED = "weighted"
LEVEL_SAMPLING = (UNIFORM, WEIGHTED)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class LossEstimate:
    value: float
    variant: str
    levels: tuple
    batch: int
    weights_id: str
    rows: np.ndarray = field(repr=False)
    node: object = field(default=None, repr=False)

    @property
    def stderr(self):
        """Standard error of ``value`` across batch rows (levels held fixed)."""
        if self.rows.size < 2:
            return float("nan")
        return float(np.std(self.rows, ddof=1) / math.sqrt(self.rows.size))

    @property
    def maximised(self):
        return -self.value


@dataclass(frozen=True)
class WeightScheme:
    kind: str = "unit"
    values: tuple = None

    KINDS = ("unit", "simplified_cancelling", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"Unknown weight scheme {self.kind!r}; expected one of {self.KINDS}")
        if self.values is not None:
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.kind == "custom":
            if not self.values:
                raise ConfigError("Custom weight scheme needs values")
            if any(not v > 0 for v in self.values):
                raise ConfigError("Level weights must all be positive")

    def values_for(self, s):
        if self.kind == "unit":
            return np.ones(s.T)
        if self.kind == "simplified_cancelling":
            return np.array([cancelling_weight(s, t) for t in range(1, s.T + 1)])
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != s.T:
            raise ConfigError(f"Custom weights have {values.size} entries, schedule has T={s.T}")
        return values

    def describe(self):
        return self.kind if self.kind != "custom" else f"custom[{len(self.values)}]"

    def to_dict(self):
        out = {"kind": self.kind}
        if self.values is not None:
            out["values"] = list(self.values)
        return out


def cancelling_weight(s, t):
    """w = sigma_t^2 c^2 / (a^2 d^2): turns the eps-mode RB loss into a plain squared error."""
    coeffs = posterior_coefficients(s, t)
    return s.noising_var(t) * coeffs.c ** 2 / (coeffs.a ** 2 * coeffs.d ** 2)


def vdm_weight(s, t):
    """SNR(t-1) - SNR(t); at t = 1 the floor 1 / (1 - lambda_1^2) stands in for the infinite SNR(0)."""
    t = s.check_level(t)
    if t == 1:
        return 1.0 / s.noising_var(1)
    return s.snr_at(t - 1) - s.snr_at(t)


def entropy_constant(s, D=1):
    """Sum over levels of the differential entropy of q(x_t | x_{t-1}), times D."""
    return D * float(np.sum(0.5 * np.log(2.0 * math.pi * math.e * s.sigma2)))


def check_compatibility(variant, mode, variance_mode):
    if variant not in VARIANTS:
        raise ConfigError(f"Unknown objective {variant!r}; expected one of {VARIANTS}")
    if variant == SIMPLIFIED_DDPM and mode != PREDICT_EPS:
        raise ConfigError("simplified_ddpm needs a predict_eps model")
    if variant == VDM and (mode != PREDICT_X0 or variance_mode != POSTERIOR_VARIANCE):
        raise ConfigError("vdm needs a predict_x0 model with posterior_variance")


def _gaussian_nll_rows(target, mean, var):
    D = target.shape[1]
    return 0.5 * total(square(target - mean), axis=1) * (1.0 / var) + 0.5 * D * (LOG_2PI + math.log(var))


def _reverse_moments(model, s, t, x_t):
    coeffs = posterior_coefficients(s, t)
    prediction = denoiser.predict(model, x_t, t)
    mu = denoiser.mean_from_prediction(coeffs, x_t, prediction, model.mode)
    return coeffs, mu, denoiser.variance_for_level(coeffs, s, t, model.variance_mode)


def _estimate(rows, variant, levels, batch, weights_id):
    node = average(rows)
    value = float(value_of(node))
    if not math.isfinite(value):
        raise NonFiniteError(f"{variant} objective is not finite")
    return LossEstimate(
        value=value,
        variant=variant,
        levels=tuple(int(t) for t in levels),
        batch=batch,
        weights_id=weights_id,
        rows=np.array(value_of(rows), dtype=np.float64).reshape(-1),
        node=node,
    )


def naive_level_rows(model, s, t, x0, rng):
    t = s.check_level(t)
    if t == 1:
        x_prev = x0
    else:
        x_prev, _ = conditional_on_data(s, t - 1, x0, rng)
    x_t = noise_step(s, t, x_prev, rng)
    _, mu, var = _reverse_moments(model, s, t, x_t)
    return _gaussian_nll_rows(x_prev, mu, var)


def rao_blackwell_level_rows(model, s, t, x0, rng):
    t = s.check_level(t)
    x_t, _ = conditional_on_data(s, t, x0, rng)
    coeffs, mu, var = _reverse_moments(model, s, t, x_t)
    D = x0.shape[1]
    residual = total(square(coeffs.mean(x0, x_t) - mu), axis=1)
    return 0.5 * ((residual + D * coeffs.var) * (1.0 / var) + D * (LOG_2PI + math.log(var)))


def naive_level_loss(model, s, t, x0, rng):
    """Monte-Carlo -log N(x_{t-1}; mu_theta(x_t), sigma_theta^2) with both states sampled."""
    x0 = as_batch(x0, "x0")
    return _estimate(naive_level_rows(model, s, t, x0, rng), NAIVE, [t], x0.shape[0], "unit")


def rao_blackwell_level_loss(model, s, t, x0, rng):
    """The naive loss with the inner expectation over x_{t-1} taken in closed form."""
    x0 = as_batch(x0, "x0")
    return _estimate(rao_blackwell_level_rows(model, s, t, x0, rng), RAO_BLACKWELL, [t], x0.shape[0], "unit")


def _uniform_levels(rng, T, levels_per_step, exhaustive):
    if exhaustive:
        return np.arange(1, T + 1), 1.0
    if levels_per_step < 1:
        raise ConfigError(f"levels_per_step must be >= 1, got {levels_per_step}")
    return rng.integers(1, T + 1, size=levels_per_step), T / levels_per_step


def tied_objective(model, s, weights, x0, rng, levels_per_step=1, level_sampling=UNIFORM,
                   estimator=RAO_BLACKWELL, exhaustive=False):
    """
    Unbiased estimate of sum_t w_t L_t with shared parameters.

    ``uniform`` draws levels uniformly and scales by T / levels_per_step.
    ``weighted`` draws levels with probability proportional to w and scales
    by sum(w) / levels_per_step instead of weighting each term.
    ``exhaustive`` visits every level once (unit scale).
    """
    if estimator not in (NAIVE, RAO_BLACKWELL):
        raise ConfigError(f"Unknown level estimator {estimator!r}")
    if level_sampling not in LEVEL_SAMPLING:
        raise ConfigError(f"Unknown level sampling {level_sampling!r}; expected one of {LEVEL_SAMPLING}")
    x0 = as_batch(x0, "x0")
    w = weights.values_for(s)
    level_rows = naive_level_rows if estimator == NAIVE else rao_blackwell_level_rows

    if level_sampling == WEIGHTED and not exhaustive:
        if levels_per_step < 1:
            raise ConfigError(f"levels_per_step must be >= 1, got {levels_per_step}")
        levels = rng.choice(s.T, size=levels_per_step, p=w / w.sum()) + 1
        scale = float(w.sum()) / levels_per_step
        rows = 0.0
        for t in levels:
            rows = rows + level_rows(model, s, int(t), x0, rng)
        rows = scale * rows
    else:
        levels, scale = _uniform_levels(rng, s.T, levels_per_step, exhaustive)
        rows = 0.0
        for t in levels:
            rows = rows + (scale * w[t - 1]) * level_rows(model, s, int(t), x0, rng)
    return _estimate(rows, estimator, levels, x0.shape[0], f"{weights.describe()}/{level_sampling}")


def simplified_ddpm_loss(model, s, x0, rng, levels_per_step=1, exhaustive=False):
    """(T / 2) * mean (eps - eps_hat)^2 over uniformly sampled levels."""
    if model.mode != PREDICT_EPS:
        raise ModeMismatchError(f"simplified_ddpm needs {PREDICT_EPS}, model is {model.mode}")
    x0 = as_batch(x0, "x0")
    levels, scale = _uniform_levels(rng, s.T, levels_per_step, exhaustive)
    rows = 0.0
    for t in levels:
        x_t, eps = conditional_on_data(s, int(t), x0, rng)
        eps_hat = denoiser.predict(model, x_t, int(t))
        rows = rows + (0.5 * scale) * total(square(eps - eps_hat), axis=1)
    return _estimate(rows, SIMPLIFIED_DDPM, levels, x0.shape[0], "simplified_cancelling")


def vdm_level_rows(model, s, t, x0, eps):
    """0.5 * w_t * |x0 - x0_hat(x_t)|^2 with x_t built from the given noise."""
    x_t, _ = conditional_on_data(s, t, x0, None, noise=eps)
    x0_hat = denoiser.predict(model, x_t, t)
    return 0.5 * vdm_weight(s, t) * total(square(x0 - x0_hat), axis=1)


def vdm_loss(model, s, x0, rng, levels_per_step=1, exhaustive=False):
    if model.mode != PREDICT_X0 or model.variance_mode != POSTERIOR_VARIANCE:
        raise ModeMismatchError("vdm needs a predict_x0 model with posterior_variance")
    x0 = as_batch(x0, "x0")
    levels, scale = _uniform_levels(rng, s.T, levels_per_step, exhaustive)
    rows = 0.0
    for t in levels:
        eps = rng.standard_normal(x0.shape)
        rows = rows + scale * vdm_level_rows(model, s, int(t), x0, eps)
    return _estimate(rows, VDM, levels, x0.shape[0], "snr_difference")


def _trajectory_log_likelihood_rows(model, s, chain):
    rows = 0.0
    for t in range(1, s.T + 1):
        _, mu, var = _reverse_moments(model, s, t, chain[t])
        rows = rows - _gaussian_nll_rows(chain[t - 1], mu, var)
    return rows


def _prior_log_density_rows(x_T):
    return -0.5 * np.sum(x_T ** 2 + LOG_2PI, axis=1)


def elbo(model, s, x0, rng):
    """
    Simple Monte-Carlo ELBO over full forward trajectories.

    Returned as -ELBO. With the noising chain as the fixed approximate
    posterior, -log q(x_1..T | x_0) contributes exactly the entropy constant.
    """
    x0 = as_batch(x0, "x0")
    chain = sample_trajectory(s, x0, rng)
    log_joint = _trajectory_log_likelihood_rows(model, s, chain) + _prior_log_density_rows(chain[-1])
    rows = -(log_joint + entropy_constant(s, x0.shape[1]))
    return _estimate(rows, ELBO, range(1, s.T + 1), x0.shape[0], "unit")


def trajectory_ddpm_loss(model, s, x0, rng):
    """Unweighted naive DDPM loss summed over every level of one shared forward trajectory."""
    x0 = as_batch(x0, "x0")
    chain = sample_trajectory(s, x0, rng)
    rows = -_trajectory_log_likelihood_rows(model, s, chain)
    return _estimate(rows, NAIVE, range(1, s.T + 1), x0.shape[0], "unit")


def linear_gaussian_log_likelihood(predictor, x0):
    """
    Exact per-row log p(x_0) for a reverse chain x_{t-1} = m_t x_t + sqrt(v_t) z
    started at x_T ~ N(0, I). The marginal is N(0, V_0) with
    V_{t-1} = m_t^2 V_t + v_t and V_T = 1.
    """
    x0 = as_batch(x0, "x0")
    slopes = predictor.mean_slopes()
    variances = predictor.variances()
    V = 1.0
    for m, v in zip(slopes[::-1], variances[::-1]):
        V = m * m * V + v
    D = x0.shape[1]
    return -0.5 * (np.sum(x0 ** 2, axis=1) / V + D * (LOG_2PI + math.log(V)))


def objective(variant, model, s, x0, rng, weights=None, levels_per_step=1, level_sampling=UNIFORM):
    """Dispatch one training step's objective by variant name."""
    if variant in (NAIVE, RAO_BLACKWELL):
        return tied_objective(model, s, weights or WeightScheme(), x0, rng, levels_per_step, level_sampling, variant)
    if variant == SIMPLIFIED_DDPM:
        return simplified_ddpm_loss(model, s, x0, rng, levels_per_step)
    if variant == VDM:
        return vdm_loss(model, s, x0, rng, levels_per_step)
    if variant == ELBO:
        return elbo(model, s, x0, rng)
    raise ConfigError(f"Unknown objective {variant!r}; expected one of {VARIANTS}")
