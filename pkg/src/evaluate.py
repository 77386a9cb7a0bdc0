"""
Metrics and the numerical experiments run against trained or analytic models.

Everything here is a deterministic function of its inputs and seeds.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

import datasets
import objectives
import schedule
from autodiff import value_of
from constants import SCORE_GRID_POINTS, SCORE_GRID_SPAN
from denoiser import PREDICT_EPS
from errors import ConfigError, ModeMismatchError, UnsupportedSpecError
from forward import as_batch, sample_trajectory
from records import append_csv, write_csv, write_json

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
HERMITE_NODES = 40
GRID_POINTS_2D = 81


@dataclass
class MetricReport:
    metrics: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name, value):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"Metric {name} is not finite: {value}")
        self.metrics[name] = value

    def violations(self, thresholds):
        """Names of metrics that exceed an upper threshold."""
        out = []
        for name, limit in sorted(thresholds.items()):
            if name in self.metrics and self.metrics[name] > limit:
                out.append(name)
        return out

    def to_dict(self):
        return {"metrics": dict(self.metrics), "metadata": dict(self.metadata)}

    def write_json(self, path):
        return write_json(path, self.to_dict())

    def append_csv(self, path):
        keys = sorted(self.metrics)
        header = sorted(self.metadata) + keys
        row = [self.metadata[k] for k in sorted(self.metadata)] + [self.metrics[k] for k in keys]
        return append_csv(path, header, row)


def moment_errors(samples, spec):
    """
    Per-coordinate error of the sample mean and variance against the analytic
    moments, each with its standard error.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < 2:
        raise ValueError("Moment errors need at least two samples")
    mean, var = spec.analytic_moments()
    sample_mean = samples.mean(axis=0)
    centred = samples - sample_mean
    sample_var = np.mean(centred ** 2, axis=0) * n / (n - 1)
    fourth = np.mean(centred ** 4, axis=0)
    return {
        "mean_error": sample_mean - mean,
        "mean_se": np.sqrt(sample_var / n),
        "var_error": sample_var - var,
        "var_se": np.sqrt(np.maximum(fourth - sample_var ** 2, 0.0) / n),
    }


def kl_divergence(p, q):
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def histogram_kl(samples, spec, bins=50, value_range=(-4.0, 4.0)):
    """
    KL(empirical histogram || analytic bin masses).

    Counts get add-one smoothing so empty bins stay finite; analytic masses are
    floored at 1e-12 and renormalised over the histogram window.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples.reshape(-1, 1)
    D = samples.shape[1]
    if D not in (1, 2) or D != spec.dim:
        raise UnsupportedSpecError(f"Histogram KL supports D in (1, 2) matching the data, got D={D}")
    if bins < 10:
        raise ConfigError(f"Histogram KL needs at least 10 bins, got {bins}")
    low, high = value_range
    edges = [np.linspace(low, high, bins + 1)] * D
    if D == 1:
        counts, _ = np.histogram(samples[:, 0], bins=edges[0])
    else:
        counts, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=edges)
    p = (counts + 1.0) / (counts.sum() + counts.size)
    q = np.maximum(datasets.bin_probabilities(spec, edges), PROBABILITY_FLOOR)
    q = q / q.sum()
    return kl_divergence(p, q)


def _score_grid(spec, s, t, points):
    means, variances = datasets.noisy_components(spec, s, t)
    mean, var = _mixture_moments(spec.weights, means, variances)
    axes = [np.linspace(m - SCORE_GRID_SPAN * math.sqrt(v), m + SCORE_GRID_SPAN * math.sqrt(v), points)
            for m, v in zip(mean, var)]
    if spec.dim == 1:
        return axes[0].reshape(-1, 1)
    a, b = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([a.reshape(-1), b.reshape(-1)])


def _mixture_moments(weights, means, variances):
    mean = weights @ means
    return mean, weights @ (variances + means ** 2) - mean ** 2


def default_levels(T):
    return sorted({1, max(1, T // 2), T})


def score_error_sweep(model, spec, s, levels=None, points=SCORE_GRID_POINTS):
    """
    RMSE between the model's noise prediction and the optimal one on a grid
    spanning +-4 standard deviations of q_t, weighted by q_t.
    """
    if model.mode != PREDICT_EPS:
        raise ModeMismatchError(f"Score sweeps need a {PREDICT_EPS} model, got {model.mode}")
    if spec.dim > 2:
        raise UnsupportedSpecError(f"Score sweeps support D <= 2, got D={spec.dim}")
    levels = default_levels(s.T) if levels is None else [s.check_level(t) for t in levels]
    points = points if spec.dim == 1 else GRID_POINTS_2D
    out = {}
    for t in levels:
        grid = _score_grid(spec, s, t, points)
        log_q = datasets.noisy_log_density(spec, s, t, grid)
        w = np.exp(log_q - log_q.max())
        w = w / w.sum()
        err = np.sum((np.asarray(value_of(model.predict(grid, t))) - datasets.optimal_epsilon(spec, s, t, grid)) ** 2, axis=1)
        out[t] = float(np.sqrt(np.sum(w * err)))
    return out


@dataclass(frozen=True)
class EndpointGap:
    T: int
    loss_a: float
    loss_b: float
    gap: float
    relative_gap: float
    stderr: float = float("nan")


def matched_schedules(T, beta1, beta_end):
    """Linear-beta and log-SNR-linear schedules sharing SNR(1) and SNR(T)."""
    linear = schedule.make_linear_beta(T, beta1, beta_end=beta_end)
    return linear, schedule.make_log_snr_linear(T, linear.snr_at(1), linear.snr_at(T))


def check_matched_endpoints(s1, s2, rtol=1e-9):
    if s1.T != s2.T:
        raise ConfigError(f"Schedules have different T ({s1.T} vs {s2.T})")
    for t in (1, s1.T):
        a, b = s1.snr_at(t), s2.snr_at(t)
        if abs(a - b) > rtol * max(abs(a), abs(b)):
            raise ConfigError(f"SNR endpoints differ at t={t}: {a!r} vs {b!r}")


def _quadrature_batch(spec, nodes=HERMITE_NODES):
    """(x0, eps, weight) rows whose weighted sums are exact Gaussian-mixture expectations for polynomials."""
    if spec.dim != 1:
        raise UnsupportedSpecError("Exhaustive expectations are implemented for D = 1; use monte_carlo")
    z, w = hermegauss(nodes)
    w = w / math.sqrt(2.0 * math.pi)
    x0 = np.concatenate([spec.means[k, 0] + math.sqrt(spec.variances[k, 0]) * z for k in range(spec.components)])
    wx = np.concatenate([spec.weights[k] * w for k in range(spec.components)])
    X, E = np.meshgrid(x0, z, indexing="ij")
    W = np.outer(wx, w)
    return X.reshape(-1, 1), E.reshape(-1, 1), W.reshape(-1)


def expected_vdm_loss(model, s, spec, nodes=HERMITE_NODES):
    """sum_t E[0.5 w_t (x0 - x0_hat)^2] by quadrature over x0 and eps."""
    x0, eps, weights = _quadrature_batch(spec, nodes)
    total = 0.0
    for t in range(1, s.T + 1):
        rows = np.asarray(value_of(objectives.vdm_level_rows(model, s, t, x0, eps)))
        total += float(weights @ rows)
    return total


def endpoint_invariance_gap(predictor_for, spec, pairs, method="exhaustive", n=10000, seed=0):
    """
    |VDM loss under s1 - VDM loss under s2| for each matched schedule pair,
    with every level visited. ``predictor_for(s)`` returns the fixed
    predictor to use under schedule s.
    """
    out = []
    for s1, s2 in pairs:
        check_matched_endpoints(s1, s2)
        model_a, model_b = predictor_for(s1), predictor_for(s2)
        if method == "exhaustive":
            loss_a = expected_vdm_loss(model_a, s1, spec)
            loss_b = expected_vdm_loss(model_b, s2, spec)
            se = float("nan")
        elif method == "monte_carlo":
            x0 = datasets.sample_data(spec, n, np.random.default_rng(seed))
            est_a = objectives.vdm_loss(model_a, s1, x0, np.random.default_rng([seed, 1]), exhaustive=True)
            est_b = objectives.vdm_loss(model_b, s2, x0, np.random.default_rng([seed, 1]), exhaustive=True)
            loss_a, loss_b = est_a.value, est_b.value
            diff = est_a.rows - est_b.rows
            se = float(np.std(diff, ddof=1) / math.sqrt(diff.size))
        else:
            raise ConfigError(f"Unknown endpoint method {method!r}; expected exhaustive or monte_carlo")
        gap = abs(loss_a - loss_b)
        scale = max(abs(loss_a), abs(loss_b))
        out.append(EndpointGap(s1.T, loss_a, loss_b, gap, gap / scale if scale > 0 else 0.0, se))
        logger.debug("T=%d endpoint gap %.6g (relative %.3g)", s1.T, gap, out[-1].relative_gap)
    return out


ENDPOINT_HEADER = ["T", "loss_a", "loss_b", "gap", "relative_gap", "stderr"]


def export_endpoint_gaps(gaps, path):
    return write_csv(path, ENDPOINT_HEADER,
                     ([g.T, g.loss_a, g.loss_b, g.gap, g.relative_gap, g.stderr] for g in gaps))


@dataclass(frozen=True)
class ElboGap:
    gap: float
    stderr: float
    elbo_a: float
    elbo_b: float
    loss_a: float
    loss_b: float


def elbo_constancy_gap(model_a, model_b, spec, s, n, seed):
    """
    |(ELBO_a - ELBO_b) - (L_a - L_b)| with L the negative unweighted DDPM
    loss, taken as the Rao-Blackwell estimate summed over every level.

    The ELBO runs on full forward trajectories and the loss on per-level
    draws of x_t, so the two agree only in expectation. Both models share the
    data batch and, within each estimator, the noise; ``stderr`` is the
    standard error of the per-row paired difference.
    """
    x0 = datasets.sample_data(spec, n, np.random.default_rng(seed))
    unit = objectives.WeightScheme()
    results = []
    for model in (model_a, model_b):
        e = objectives.elbo(model, s, x0, np.random.default_rng([seed, 1]))
        loss = objectives.tied_objective(model, s, unit, x0, np.random.default_rng([seed, 2]),
                                         estimator=objectives.RAO_BLACKWELL, exhaustive=True)
        results.append((e, loss))
    (e_a, l_a), (e_b, l_b) = results
    elbo_a, elbo_b = e_a.maximised, e_b.maximised
    neg_loss_a, neg_loss_b = l_a.maximised, l_b.maximised
    diff = (-e_a.rows + e_b.rows) - (-l_a.rows + l_b.rows)
    return ElboGap(
        gap=abs((elbo_a - elbo_b) - (neg_loss_a - neg_loss_b)),
        stderr=float(np.std(diff, ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else float("nan"),
        elbo_a=elbo_a, elbo_b=elbo_b, loss_a=l_a.value, loss_b=l_b.value,
    )


def entropy_constant_mc(s, D, n, rng):
    """
    Monte-Carlo sum over levels of E[-log q(x_t | x_{t-1})] on forward
    trajectories of standard-normal data; returns (estimate, stderr).
    """
    x0 = rng.standard_normal((n, D))
    chain = sample_trajectory(s, x0, rng)
    rows = np.zeros(n)
    for t in range(1, s.T + 1):
        var = s.noising_var(t)
        resid = chain[t] - s.lam(t) * chain[t - 1]
        rows += np.sum(0.5 * math.log(2.0 * math.pi * var) + 0.5 * resid ** 2 / var, axis=1)
    return float(rows.mean()), float(rows.std(ddof=1) / math.sqrt(n))


def write_svg_scatter(path, samples, reference=None, size=400, value_range=(-4.0, 4.0)):
    """Standalone SVG scatter of 2-D samples with an optional reference cloud."""
    samples = as_batch(samples, "samples") if np.size(samples) else np.zeros((0, 2))
    if samples.shape[1] != 2:
        raise UnsupportedSpecError("SVG scatter needs D = 2")
    low, high = value_range
    scale = size / (high - low)

    def to_px(x, y):
        return (x - low) * scale, size - (y - low) * scale

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect x="0" y="0" width="{size}" height="{size}" fill="white" stroke="#333"/>']
    for cloud, style in ((reference, 'r="1.2" fill="#4a9eff" opacity="0.25"'), (samples, 'r="1.5" fill="#ff6b6b" opacity="0.6"')):
        if cloud is None:
            continue
        for x, y in np.asarray(cloud)[:, :2]:
            cx, cy = to_px(x, y)
            lines.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" {style}/>')
    lines.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
