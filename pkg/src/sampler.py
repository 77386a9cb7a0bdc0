"""Ancestral generation from the learned reverse conditionals."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

import denoiser
from autodiff import value_of
from denoiser import POSTERIOR_VARIANCE
from errors import ConfigError, NonFiniteError, ShapeMismatchError
from forward import as_batch, posterior_coefficients
from records import write_matrix_csv

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SampleTrace:
    """
    ``chain[i]`` is the batch at ``levels[i]``; levels run from the start level
    down to 0. Without keep_trace only the final level is retained.
    """

    chain: tuple = field(repr=False)
    levels: tuple
    seed: object
    schedule_id: str

    @property
    def samples(self):
        return self.chain[-1]

    def at(self, level):
        try:
            return self.chain[self.levels.index(level)]
        except ValueError:
            raise KeyError(f"Level {level} was not retained in this trace") from None


def reverse_step(model, s, t, x_t, rng, denoise_final=False):
    """x_{t-1} = mu_theta(x_t) + sqrt(sigma_theta^2) z; z is zero on a noiseless final step."""
    coeffs = posterior_coefficients(s, t)
    prediction = value_of(denoiser.predict(model, x_t, t))
    mu = denoiser.mean_from_prediction(coeffs, x_t, prediction, model.mode)
    if t == 1 and (model.variance_mode == POSTERIOR_VARIANCE or denoise_final):
        x_prev = mu
    else:
        var = denoiser.variance_for_level(coeffs, s, t, model.variance_mode)
        x_prev = mu + math.sqrt(var) * rng.standard_normal(x_t.shape)
    if not np.all(np.isfinite(x_prev)):
        raise NonFiniteError(f"Reverse chain went non-finite at level {t - 1}", level=t - 1)
    return x_prev


def denoise_from(model, s, t_start, x_init, rng, keep_trace=True, denoise_final=False, seed=None):
    t_start = s.check_level(t_start)
    x = as_batch(x_init, "x_init") if np.size(x_init) else np.zeros((0, model.data_dim))
    if x.shape[1] != model.data_dim:
        raise ShapeMismatchError(f"x_init has {x.shape[1]} columns, model expects {model.data_dim}")
    chain, levels = [x], [t_start]
    for t in range(t_start, 0, -1):
        x = reverse_step(model, s, t, x, rng, denoise_final) if x.shape[0] else x
        if keep_trace:
            chain.append(x)
            levels.append(t - 1)
        else:
            chain, levels = [x], [t - 1]
    logger.debug("Reverse chain from level %d produced %d rows", t_start, x.shape[0])
    return SampleTrace(tuple(chain), tuple(levels), seed, s.describe())


def generate(model, s, n, rng, keep_trace=True, denoise_final=False, seed=None):
    """Draw x_T ~ N(0, I) and run the reverse chain down to level 0."""
    if n < 0:
        raise ConfigError(f"Sample count must be non-negative, got {n}")
    x_T = rng.standard_normal((n, model.data_dim))
    return denoise_from(model, s, s.T, x_T, rng, keep_trace, denoise_final, seed)


def export_samples(trace, path):
    return write_matrix_csv(path, trace.samples)


def export_trace(trace, directory):
    """One CSV per retained level, named level_<t>.csv."""
    paths = []
    for level, batch in zip(trace.levels, trace.chain):
        paths.append(write_matrix_csv(directory / f"level_{level}.csv", batch))
    return paths
