import copy
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import datasets
import schedule
from constants import DEFAULT_SEED, EMBED_DIM, HIDDEN_LAYERS, HIDDEN_WIDTH
from denoiser import PREDICT_EPS, NOISING_VARIANCE, check_modes
from errors import ConfigError, DDPMError
from objectives import LEVEL_SAMPLING, UNIFORM, WeightScheme, check_compatibility

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "default.config.json"
SEED_ENV = "DDPM_SEED"
MODEL_KINDS = ("network", "mixture_oracle", "unit_gaussian_oracle", "linear", "zero")
METRICS = ("moments", "histogram_kl", "score_error", "endpoint_invariance", "elbo_constancy")
LR_DECAYS = ("constant", "cosine")


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "network"
    hidden: tuple = (HIDDEN_WIDTH,) * HIDDEN_LAYERS
    embed_dim: int = EMBED_DIM
    mode: str = PREDICT_EPS
    variance_mode: str = NOISING_VARIANCE
    slopes: tuple = None


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "simplified_ddpm"
    weights: WeightScheme = field(default_factory=WeightScheme)
    level_sampling: str = UNIFORM
    batch_size: int = 256
    levels_per_step: int = 1
    steps: int = 2000
    adam: AdamHyper = field(default_factory=AdamHyper)
    seed: int = DEFAULT_SEED
    checkpoint_every: int = 500
    log_every: int = 100
    progress: bool = True
    log_wall_time: bool = False
    lr_decay: str = "constant"
    ema_decay: float = 0.0


@dataclass(frozen=True)
class EndpointConfig:
    T_values: tuple = (64, 128, 256)
    beta1: float = 1e-4
    beta_end: float = 0.02
    method: str = "exhaustive"
    n: int = 10000


@dataclass(frozen=True)
class EvalConfig:
    metrics: tuple = ("moments", "histogram_kl")
    n_samples: int = 100000
    bins: int = 50
    range: tuple = (-4.0, 4.0)
    score_levels: tuple = None
    denoise_final: bool = False
    svg: bool = True
    elbo_n: int = 100000
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    thresholds: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class RunConfig:
    data: datasets.DataSpec
    schedule: schedule.Schedule
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig
    output_dir: str = "runs"
    seed: int = DEFAULT_SEED
    log_level: str = "INFO"
    log_dir: str = "logs"
    raw: dict = field(default_factory=dict, repr=False)


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in ("data", "schedule"):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _read(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return payload


def _positive_int(name, value):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return value


def _build(section, cls, name):
    if not isinstance(section, dict):
        raise ConfigError(f"'{name}' must be an object")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"Bad '{name}' section: {exc}") from exc


def _seed_override(seed):
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return seed
    try:
        return int(raw)
    except ValueError:
        logger.warning("Ignoring non-integral %s=%r", SEED_ENV, raw)
        return seed


def parse_config(payload, use_env=True):
    """Validate a merged config dict and build the typed RunConfig."""
    payload = copy.deepcopy(payload)
    seed = payload.get("seed", DEFAULT_SEED)
    if use_env:
        seed = _seed_override(seed)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

    try:
        spec = datasets.from_dict(payload["data"])
        sched = schedule.from_dict(payload["schedule"])
    except KeyError as exc:
        raise ConfigError(f"Config is missing section {exc}") from exc
    except DDPMError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc

    model_raw = dict(payload.get("model", {}))
    if "hidden" in model_raw:
        model_raw["hidden"] = tuple(_positive_int("model.hidden", h) for h in model_raw["hidden"])
    if model_raw.get("slopes") is not None:
        model_raw["slopes"] = tuple(float(v) for v in model_raw["slopes"])
    model = _build(model_raw, ModelConfig, "model")
    if model.kind not in MODEL_KINDS:
        raise ConfigError(f"Unknown model kind {model.kind!r}; expected one of {MODEL_KINDS}")
    check_modes(model.mode, model.variance_mode)

    train_raw = dict(payload.get("train", {}))
    train_raw["weights"] = _build(train_raw.get("weights", {}), WeightScheme, "train.weights")
    train_raw["adam"] = _build(train_raw.get("adam", {}), AdamHyper, "train.adam")
    train_raw["seed"] = seed
    train = _build(train_raw, TrainConfig, "train")
    check_train(train, model.mode, model.variance_mode, trainable=model.kind == "network")

    eval_raw = dict(payload.get("eval", {}))
    endpoint_raw = dict(eval_raw.get("endpoint", {}))
    if "T_values" in endpoint_raw:
        endpoint_raw["T_values"] = tuple(_positive_int("eval.endpoint.T_values", T) for T in endpoint_raw["T_values"])
    eval_raw["endpoint"] = _build(endpoint_raw, EndpointConfig, "eval.endpoint")
    for key in ("metrics", "range", "score_levels"):
        if eval_raw.get(key) is not None:
            eval_raw[key] = tuple(eval_raw[key])
    evaluation = _build(eval_raw, EvalConfig, "eval")
    unknown = [m for m in evaluation.metrics if m not in METRICS]
    if unknown:
        raise ConfigError(f"Unknown metrics {unknown}; expected any of {METRICS}")
    _positive_int("eval.bins", evaluation.bins)

    return RunConfig(
        data=spec,
        schedule=sched,
        model=model,
        train=train,
        eval=evaluation,
        output_dir=str(payload.get("output_dir", "runs")),
        seed=seed,
        log_level=str(payload.get("log_level", "INFO")),
        log_dir=payload.get("log_dir", "logs"),
        raw={**payload, "seed": seed},
    )


def check_train(train, mode, variance_mode, trainable=True):
    for name in ("batch_size", "levels_per_step", "checkpoint_every", "log_every"):
        _positive_int(f"train.{name}", getattr(train, name))
    if isinstance(train.steps, bool) or not isinstance(train.steps, int) or train.steps < 0:
        raise ConfigError(f"train.steps must be a non-negative integer, got {train.steps!r}")
    if not train.adam.lr > 0:
        raise ConfigError(f"Adam step size must be positive, got {train.adam.lr}")
    if not (0 <= train.adam.beta1 < 1 and 0 <= train.adam.beta2 < 1) or not train.adam.eps > 0:
        raise ConfigError("Adam decays must lie in [0, 1) and eps must be positive")
    if train.lr_decay not in LR_DECAYS:
        raise ConfigError(f"Unknown lr_decay {train.lr_decay!r}; expected one of {LR_DECAYS}")
    if isinstance(train.ema_decay, bool) or not isinstance(train.ema_decay, (int, float)) or not 0 <= train.ema_decay < 1:
        raise ConfigError(f"train.ema_decay must lie in [0, 1), got {train.ema_decay!r}")
    if train.level_sampling not in LEVEL_SAMPLING:
        raise ConfigError(f"Unknown level_sampling {train.level_sampling!r}; expected one of {LEVEL_SAMPLING}")
    if trainable:
        check_compatibility(train.objective, mode, variance_mode)


def load_defaults():
    if not DEFAULT_CONFIG.exists():
        raise ConfigError(f"Default configuration {DEFAULT_CONFIG} not found")
    return _read(DEFAULT_CONFIG)


def load_config(path=None, overrides=None, use_env=True):
    """
    Load a run config, deep-merged over default.config.json.

    With no path, ``config.json`` in the working directory is used and is
    first copied from the defaults if it does not exist yet.
    """
    if path is None:
        path = Path("config.json")
        if not path.exists() and DEFAULT_CONFIG.exists():
            shutil.copy(DEFAULT_CONFIG, path)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Configuration file '{path}' not found")
    merged = _merge(load_defaults(), _read(path))
    if overrides:
        merged = _merge(merged, overrides)
    return parse_config(merged, use_env=use_env)
