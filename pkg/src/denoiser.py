"""
Level-conditioned feed-forward denoiser.

The network sees [x_t, embed(t - 1)] (the output level, matching
mu_theta(x_t, t - 1)) and returns either a clean-data estimate or a noise
estimate depending on ``mode``. The fixed variance comes from the schedule,
never from the network.
"""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

import autodiff
from autodiff import GradientTape
from constants import EMBED_BASE, EMBED_DIM, HIDDEN_LAYERS, HIDDEN_WIDTH
from errors import (
    ConfigError,
    LevelOutOfRangeError,
    ModeMismatchError,
    NonFiniteError,
    ShapeMismatchError,
    TrainingDivergenceError,
)
from forward import as_batch

logger = logging.getLogger(__name__)

PREDICT_X0 = "predict_x0"
PREDICT_EPS = "predict_eps"
MODES = (PREDICT_X0, PREDICT_EPS)
NOISING_VARIANCE = "noising_variance"
POSTERIOR_VARIANCE = "posterior_variance"
VARIANCE_MODES = (NOISING_VARIANCE, POSTERIOR_VARIANCE)


def check_modes(mode, variance_mode):
    if mode not in MODES:
        raise ConfigError(f"Unknown mode {mode!r}; expected one of {MODES}")
    if variance_mode not in VARIANCE_MODES:
        raise ConfigError(f"Unknown variance_mode {variance_mode!r}; expected one of {VARIANCE_MODES}")


def level_embedding(t, E, T):
    """Pairs (sin(t w_k), cos(t w_k)) with w_k = EMBED_BASE^(-k / (E/2)); t may be an array."""
    if E < 2 or E % 2:
        raise ConfigError(f"Embedding width E={E} must be an even integer >= 2")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > T):
        raise ValueError(f"Embedding level outside [0, {T}]")
    freqs = EMBED_BASE ** (-np.arange(E // 2) / (E // 2))
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (E,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


@dataclass(frozen=True, eq=False)
class DenoiserParams:
    """Weights W_i of shape (fan_in, fan_out) and biases b_i of shape (fan_out,)."""

    weights: tuple
    biases: tuple
    data_dim: int
    embed_dim: int
    num_levels: int
    mode: str = PREDICT_EPS
    variance_mode: str = NOISING_VARIANCE

    def __post_init__(self):
        check_modes(self.mode, self.variance_mode)
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatchError("Need one bias per weight matrix and at least one layer")
        if self.weights[0].shape[0] != self.data_dim + self.embed_dim:
            raise ShapeMismatchError(
                f"First layer expects {self.weights[0].shape[0]} inputs, data+embedding gives {self.data_dim + self.embed_dim}"
            )
        if self.weights[-1].shape[1] != self.data_dim:
            raise ShapeMismatchError("Output width must equal the data dimension")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError(f"embed_dim={self.embed_dim} must be even")

    @property
    def arrays(self):
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @property
    def size(self):
        return sum(a.size for a in self.arrays)

    def with_arrays(self, arrays):
        arrays = list(arrays)
        return replace(self, weights=tuple(arrays[0::2]), biases=tuple(arrays[1::2]))

    def flatten(self):
        return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in self.arrays])

    def unflatten(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.size:
            raise ShapeMismatchError(f"Expected {self.size} parameters, got {vector.size}")
        arrays, offset = [], 0
        for a in self.arrays:
            arrays.append(vector[offset: offset + a.size].reshape(a.shape).copy())
            offset += a.size
        return self.with_arrays(arrays)

    def features(self, x_t, t):
        x_t = as_batch(x_t, "x_t")
        if x_t.shape[1] != self.data_dim:
            raise ShapeMismatchError(f"x_t has {x_t.shape[1]} columns, model expects {self.data_dim}")
        if not (1 <= t <= self.num_levels):
            raise LevelOutOfRangeError(t, 1, self.num_levels)
        emb = level_embedding(t - 1, self.embed_dim, self.num_levels)
        return np.hstack([x_t, np.broadcast_to(emb, (x_t.shape[0], self.embed_dim))])

    def predict(self, x_t, t):
        return _forward(self.weights, self.biases, self.features(x_t, t))

    def watch(self, tape):
        return TrackedDenoiser(self, [tape.watch(a) for a in self.arrays])

    def to_dict(self):
        return {
            "kind": "network",
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(self.weights, self.biases)],
            "mode": self.mode,
            "variance_mode": self.variance_mode,
            "embed_dim": self.embed_dim,
            "data_dim": self.data_dim,
            "num_levels": self.num_levels,
        }


class TrackedDenoiser:
    """DenoiserParams whose arrays are recorded on a GradientTape."""

    def __init__(self, params, nodes):
        self.params = params
        self.nodes = nodes
        self.mode = params.mode
        self.variance_mode = params.variance_mode
        self.data_dim = params.data_dim

    def predict(self, x_t, t):
        return _forward(self.nodes[0::2], self.nodes[1::2], self.params.features(x_t, t))


def _forward(weights, biases, h):
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        h = h @ W + b
        if i < last:
            h = autodiff.silu(h)
    return h


def init_params(data_dim, num_levels, rng, hidden=(HIDDEN_WIDTH,) * HIDDEN_LAYERS, embed_dim=EMBED_DIM,
                mode=PREDICT_EPS, variance_mode=NOISING_VARIANCE):
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases."""
    widths = [data_dim + embed_dim, *hidden, data_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return DenoiserParams(tuple(weights), tuple(biases), data_dim, embed_dim, num_levels, mode, variance_mode)


def zeros_like(params):
    return params.with_arrays([np.zeros_like(a) for a in params.arrays])


def from_dict(payload):
    try:
        layers = payload["layers"]
        weights = tuple(np.array(layer["W"], dtype=np.float64) for layer in layers)
        biases = tuple(np.array(layer["b"], dtype=np.float64) for layer in layers)
        embed_dim = int(payload["embed_dim"])
        data_dim = int(payload.get("data_dim", weights[-1].shape[1]))
        return DenoiserParams(weights, biases, data_dim, embed_dim, int(payload["num_levels"]),
                              payload["mode"], payload["variance_mode"])
    except (KeyError, IndexError, TypeError) as exc:
        raise ConfigError(f"Malformed denoiser parameters: {exc}") from exc


def predict(params, x_t, t):
    out = params.predict(x_t, t)
    if not np.all(np.isfinite(autodiff.value_of(out))):
        raise NonFiniteError("Network output is not finite", level=t)
    return out


def mean_from_prediction(coeffs, x_t, prediction, mode):
    """mu_theta from a clean-data or a noise prediction (Node or array)."""
    if mode == PREDICT_X0:
        return coeffs.a * prediction + coeffs.b * x_t
    if mode == PREDICT_EPS:
        return (coeffs.a / coeffs.c) * (x_t - coeffs.d * prediction) + coeffs.b * x_t
    raise ModeMismatchError(f"Unknown mode {mode!r}")


def variance_for_level(coeffs, s, t, variance_mode):
    """
    Fixed reverse variance sigma_theta^2 for level t.

    posterior_variance is 0 at t = 1; objectives use the noising variance
    there as a floor (the sampler separately adds no noise at that step).
    """
    t = s.check_level(t)
    if variance_mode == NOISING_VARIANCE:
        return s.noising_var(t)
    if variance_mode == POSTERIOR_VARIANCE:
        return s.noising_var(1) if t == 1 else coeffs.var
    raise ModeMismatchError(f"Unknown variance_mode {variance_mode!r}")


def loss_and_gradient(params, loss_fn):
    """
    Evaluate loss_fn(tracked_params) -> scalar Node and return (value, gradient).

    The gradient is a DenoiserParams with the same layout as ``params``.
    """
    tape = GradientTape()
    tracked = params.watch(tape)
    loss = loss_fn(tracked)
    value = float(autodiff.value_of(loss))
    if not math.isfinite(value):
        raise TrainingDivergenceError(step=None, value=value)
    if not isinstance(loss, autodiff.Node):
        return value, zeros_like(params)
    grads = tape.gradient(loss, tracked.nodes)
    return value, params.with_arrays(grads)
