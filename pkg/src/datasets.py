"""
Toy data generators with analytic oracles.

Every DataSpec is stored as a mixture of diagonal Gaussians that has already
been standardised with its analytic moments. Convolving a mixture with the
Gaussian kernel of q(x_t | x_0) gives another mixture, so noisy marginals,
scores and bin masses are all exact.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, ndtr

from errors import ConfigError, UnsupportedSpecError
from forward import as_batch
from records import write_matrix_csv

KINDS = ("unit_gaussian", "gmm1d", "ring2d", "point_mass")


@dataclass(frozen=True, eq=False)
class DataSpec:
    kind: str
    means: np.ndarray  # (K, D), standardised
    variances: np.ndarray  # (K, D) diagonal, standardised
    weights: np.ndarray  # (K,)
    params: dict

    @property
    def dim(self):
        return int(self.means.shape[1])

    @property
    def components(self):
        return int(self.means.shape[0])

    def analytic_moments(self):
        """Mean and per-coordinate variance of the stored mixture."""
        mean = self.weights @ self.means
        second = self.weights @ (self.variances + self.means ** 2)
        return mean, second - mean ** 2

    def to_dict(self):
        return {"kind": self.kind, **self.params}


def _standardise(kind, means, variances, weights, params, scale=True):
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    variances = np.broadcast_to(np.asarray(variances, dtype=np.float64), means.shape).copy()
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0) or not math.isclose(weights.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
        raise ConfigError(f"Mixture weights must be positive and sum to 1, got {weights.tolist()}")
    if np.any(variances < 0):
        raise ConfigError("Component variances must be non-negative")
    mean = weights @ means
    var = weights @ (variances + means ** 2) - mean ** 2
    centred = means - mean
    if scale:
        std = np.sqrt(var)
        centred = centred / std
        variances = variances / var
    return DataSpec(kind, centred, variances, weights / weights.sum(), dict(params))


def unit_gaussian(dim=1):
    return _standardise("unit_gaussian", np.zeros((1, dim)), np.ones((1, dim)), [1.0], {"dim": dim})


def gmm1d(means=(-2.0, 2.0), weights=(0.5, 0.5), variance=0.25):
    means = np.asarray(means, dtype=np.float64).reshape(-1, 1)
    params = {"means": list(map(float, means[:, 0])), "weights": list(map(float, weights)), "variance": float(variance)}
    return _standardise("gmm1d", means, variance, weights, params)


def ring2d(radius=2.0, count=8, variance=0.02):
    """Equal-weight isotropic Gaussians evenly spaced on a circle."""
    angles = 2.0 * np.pi * np.arange(count) / count
    means = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    params = {"radius": float(radius), "count": int(count), "variance": float(variance)}
    return _standardise("ring2d", means, variance, np.full(count, 1.0 / count), params)


def point_mass(location=0.0, dim=1):
    """A single atom; centred to 0 but necessarily left with zero variance."""
    means = np.full((1, dim), float(location))
    return _standardise("point_mass", means, 0.0, [1.0], {"location": float(location), "dim": dim}, scale=False)


_BUILDERS = {"unit_gaussian": unit_gaussian, "gmm1d": gmm1d, "ring2d": ring2d, "point_mass": point_mass}


def from_dict(descriptor):
    descriptor = dict(descriptor)
    kind = descriptor.pop("kind", None)
    if kind not in _BUILDERS:
        raise ConfigError(f"Unknown data kind {kind!r}; expected one of {KINDS}")
    try:
        return _BUILDERS[kind](**descriptor)
    except TypeError as exc:
        raise ConfigError(f"Bad parameters for {kind}: {exc}") from exc


def sample_data(spec, n, rng):
    if n == 0:
        return np.zeros((0, spec.dim))
    component = rng.choice(spec.components, size=n, p=spec.weights)
    noise = rng.standard_normal((n, spec.dim))
    return spec.means[component] + np.sqrt(spec.variances[component]) * noise


def export_csv(spec, n, rng, path):
    return write_matrix_csv(path, sample_data(spec, n, rng))


def noisy_components(spec, s, t):
    t = s.check_level(t, low=0)
    signal = s.signal(t)
    means = signal * spec.means
    variances = signal ** 2 * spec.variances + s.noise_var(t)
    if np.any(variances <= 0):
        raise UnsupportedSpecError(f"{spec.kind} has a degenerate density at level {t}")
    return means, variances


def _component_log_densities(spec, means, variances, x):
    diff = x[:, None, :] - means[None, :, :]
    return (
        np.log(spec.weights)[None, :]
        - 0.5 * np.sum(np.log(2.0 * np.pi * variances), axis=1)[None, :]
        - 0.5 * np.sum(diff ** 2 / variances[None, :, :], axis=2)
    ), diff


def _check_supported(spec):
    if spec.kind not in KINDS:
        raise UnsupportedSpecError(f"No analytic density for data kind {spec.kind!r}")


def noisy_log_density(spec, s, t, x):
    """log q_t(x) for the noisy marginal at level t."""
    _check_supported(spec)
    x = as_batch(x, "x")
    means, variances = noisy_components(spec, s, t)
    log_comp, _ = _component_log_densities(spec, means, variances, x)
    return logsumexp(log_comp, axis=1)


def noisy_marginal_score(spec, s, t, x):
    """Exact grad_x log q_t(x); returns an array shaped like the (n, D) input."""
    _check_supported(spec)
    x = as_batch(x, "x")
    means, variances = noisy_components(spec, s, t)
    log_comp, diff = _component_log_densities(spec, means, variances, x)
    resp = np.exp(log_comp - logsumexp(log_comp, axis=1, keepdims=True))
    return -np.einsum("nk,nkd->nd", resp, diff / variances[None, :, :])


def optimal_epsilon(spec, s, t, x):
    """E[eps | x_t = x] = -sqrt(1 - Lambda_t^2) * score."""
    return -math.sqrt(s.noise_var(s.check_level(t))) * noisy_marginal_score(spec, s, t, x)


def optimal_x0(spec, s, t, x):
    """E[x_0 | x_t = x] via Tweedie: (x + (1 - Lambda_t^2) * score) / Lambda_t."""
    t = s.check_level(t)
    x = as_batch(x, "x")
    return (x + s.noise_var(t) * noisy_marginal_score(spec, s, t, x)) / s.signal(t)


def _component_cdf(edges, mean, var):
    if var == 0.0:
        return (edges >= mean).astype(np.float64)
    return ndtr((edges - mean) / math.sqrt(var))


def bin_probabilities(spec, edges):
    """
    Exact mass of the clean density in each histogram bin.

    ``edges`` is a list with one increasing edge array per dimension; the
    result has shape (bins_1, ..., bins_D). Mass outside the edges is dropped.
    """
    if len(edges) != spec.dim or spec.dim not in (1, 2):
        raise UnsupportedSpecError(f"Bin probabilities need D in (1, 2) with one edge array per dimension, got D={spec.dim}")
    total = 0.0
    for k in range(spec.components):
        per_dim = [np.diff(_component_cdf(np.asarray(e, dtype=np.float64), spec.means[k, d], spec.variances[k, d]))
                   for d, e in enumerate(edges)]
        mass = per_dim[0] if spec.dim == 1 else np.outer(per_dim[0], per_dim[1])
        total = total + spec.weights[k] * mass
    return total
