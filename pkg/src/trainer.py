"""
Adam training loop over the objectives.

Each step draws from its own generator seeded with (seed, step), so a run
resumed from a checkpoint at step k continues with exactly the random
numbers an uninterrupted run would have used.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np
from tqdm import tqdm

import datasets
import denoiser
import objectives
import oracles
import schedule
from errors import ConfigError, MissingArtifactError, NonFiniteError, ShapeMismatchError, TrainingDivergenceError
from records import append_csv, read_csv, read_json, write_csv, write_json

logger = logging.getLogger(__name__)

LOSS_HEADER = ["step", "variant", "value", "seed"]
LOSS_FILE = "loss.csv"
FINAL_CHECKPOINT = "checkpoint_final.json"


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)

    def to_dict(self):
        return {"m": self.m.tolist(), "v": self.v.tolist(), "step": self.step}

    @classmethod
    def from_dict(cls, payload):
        return cls(np.array(payload["m"], dtype=np.float64), np.array(payload["v"], dtype=np.float64), int(payload["step"]))


def adam_step(params, grad, state, hyper):
    """Bias-corrected Adam update on flat parameter vectors; returns (params, state)."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ShapeMismatchError(f"Adam shapes differ: params {params.shape}, grad {grad.shape}, moments {state.m.shape}")
    step = state.step + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * (grad * grad)
    m_hat = m / (1.0 - hyper.beta1 ** step)
    v_hat = v / (1.0 - hyper.beta2 ** step)
    return params - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps), AdamState(m, v, step)


def step_rng(seed, step):
    return np.random.default_rng([seed, step])


def learning_rate(hyper, decay, step, steps):
    """Step size for 0-based ``step``; cosine anneals from lr towards 0 over ``steps``."""
    if decay == "cosine":
        return hyper.lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))
    return hyper.lr


@dataclass(frozen=True, eq=False)
class ParamAverage:
    """Exponential moving average of flat parameters, bias-corrected like the Adam moments."""
    total: np.ndarray
    decay: float
    step: int = 0

    @classmethod
    def zeros(cls, size, decay):
        return cls(np.zeros(size), float(decay), 0)

    def update(self, flat):
        return ParamAverage(self.decay * self.total + (1.0 - self.decay) * flat, self.decay, self.step + 1)

    def value(self):
        return self.total / (1.0 - self.decay ** self.step)

    def to_dict(self):
        return {"total": self.total.tolist(), "decay": self.decay, "step": self.step}

    @classmethod
    def from_dict(cls, payload):
        return cls(np.array(payload["total"], dtype=np.float64), float(payload["decay"]), int(payload["step"]))


@dataclass
class TrainResult:
    params: object
    losses: list = field(default_factory=list)
    state: AdamState = None
    run_dir: Path = None
    averaged: object = None

    def __iter__(self):
        # (params, losses) unpacking
        return iter((self.params, self.losses))

    @property
    def sampling_model(self):
        return self.averaged if self.averaged is not None else self.params


def make_run_dir(output_dir, seed, now=None):
    stamp = (now or datetime.now()).strftime("%Y%m%d-%H%M%S")
    run_dir = Path(output_dir) / f"seed{seed}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def checkpoint_payload(params, state, step, train_config, s, spec, average=None):
    payload = {
        "step": step,
        "model": params.to_dict(),
        "adam": state.to_dict() if state is not None else None,
        "train": asdict(train_config) if train_config is not None else None,
        "schedule": s.to_dict(),
        "data": spec.to_dict(),
    }
    if average is not None and average.step > 0:
        payload["ema"] = average.to_dict()
        payload["ema_model"] = params.unflatten(average.value()).to_dict()
    return payload


def save_checkpoint(path, params, state, step, train_config, s, spec, average=None):
    return write_json(path, checkpoint_payload(params, state, step, train_config, s, spec, average))


@dataclass(frozen=True, eq=False)
class Checkpoint:
    model: object
    schedule: schedule.Schedule
    spec: datasets.DataSpec
    step: int
    state: AdamState
    raw: dict
    average: ParamAverage = None
    averaged: object = None

    @property
    def sampling_model(self):
        """The averaged weights when the run kept them, else the raw ones."""
        return self.averaged if self.averaged is not None else self.model


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Checkpoint '{path}' not found")
    payload = read_json(path)
    try:
        s = schedule.from_dict(payload["schedule"])
        spec = datasets.from_dict(payload["data"])
        model = oracles.from_dict(payload["model"], spec, s)
        state = AdamState.from_dict(payload["adam"]) if payload.get("adam") else None
        average = ParamAverage.from_dict(payload["ema"]) if payload.get("ema") else None
        averaged = oracles.from_dict(payload["ema_model"], spec, s) if payload.get("ema_model") else None
        return Checkpoint(model, s, spec, int(payload.get("step", 0)), state, payload, average, averaged)
    except KeyError as exc:
        raise ConfigError(f"Checkpoint '{path}' is missing {exc}") from exc


def _step_loss(params, config, spec, s, step):
    rng = step_rng(config.seed, step)
    x0 = datasets.sample_data(spec, config.batch_size, rng)
    estimates = []

    def loss_fn(tracked):
        estimate = objectives.objective(
            config.objective, tracked, s, x0, rng,
            weights=config.weights,
            levels_per_step=config.levels_per_step,
            level_sampling=config.level_sampling,
        )
        estimates.append(estimate)
        return estimate.node

    try:
        value, grad = denoiser.loss_and_gradient(params, loss_fn)
    except (NonFiniteError, TrainingDivergenceError) as exc:
        raise TrainingDivergenceError(step=step, value=getattr(exc, "value", math.nan)) from exc
    flat_grad = grad.flatten()
    if not np.all(np.isfinite(flat_grad)):
        raise TrainingDivergenceError(step=step, value=value)
    return estimates[-1], flat_grad


def _reset_loss_file(path, header, start):
    """Keep only rows before ``start`` so a rerun or resume never duplicates steps."""
    kept = []
    if start > 0 and path.exists():
        kept = [[row.get(name, "") for name in header] for row in read_csv(path) if int(row["step"]) < start]
    write_csv(path, header, kept)


def train(config, spec, s, init, run_dir=None, resume=None):
    """
    Run ``config.steps`` Adam steps from ``init`` (or from ``resume``, a
    Checkpoint) and return a TrainResult. With a run_dir, the loss series is
    written to loss.csv, dropping any rows an earlier run left at or after the
    starting step, and checkpoints are written every checkpoint_every steps
    plus once at the end.
    """
    objectives.check_compatibility(config.objective, init.mode, init.variance_mode)
    if init.num_levels != s.T or init.data_dim != spec.dim:
        raise ConfigError(
            f"Model built for T={init.num_levels}, D={init.data_dim}; run uses T={s.T}, D={spec.dim}"
        )

    params = init
    state = AdamState.zeros(init.size)
    average = ParamAverage.zeros(init.size, config.ema_decay) if config.ema_decay > 0 else None
    start = 0
    if resume is not None:
        params, state, start = resume.model, resume.state or AdamState.zeros(init.size), resume.step
        if average is not None and resume.average is not None:
            average = resume.average
        logger.info("Resuming from step %d", start)

    header = LOSS_HEADER + (["wall_ms"] if config.log_wall_time else [])
    losses = []
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        _reset_loss_file(run_dir / LOSS_FILE, header, start)
    steps = tqdm(range(start, config.steps), desc="train", disable=not config.progress,
                 initial=start, total=config.steps)
    for step in steps:
        began = time.perf_counter()
        estimate, flat_grad = _step_loss(params, config, spec, s, step)
        hyper = replace(config.adam, lr=learning_rate(config.adam, config.lr_decay, step, config.steps))
        new_flat, state = adam_step(params.flatten(), flat_grad, state, hyper)
        params = params.unflatten(new_flat)
        if average is not None:
            average = average.update(new_flat)

        row = [step, estimate.variant, estimate.value, config.seed]
        if config.log_wall_time:
            row.append((time.perf_counter() - began) * 1000.0)
        losses.append(estimate.value)
        if run_dir is not None:
            append_csv(run_dir / LOSS_FILE, header, row)
            if (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(run_dir / f"checkpoint_{step + 1:06d}.json", params, state, step + 1, config, s, spec,
                                average)
        if (step + 1) % config.log_every == 0:
            logger.info("step %d %s loss %.6g", step + 1, estimate.variant, estimate.value)
            steps.set_postfix(loss=f"{estimate.value:.4g}")

    if run_dir is not None:
        save_checkpoint(run_dir / FINAL_CHECKPOINT, params, state, max(config.steps, start), config, s, spec, average)
    averaged = params.unflatten(average.value()) if average is not None and average.step > 0 else None
    return TrainResult(params, losses, state, run_dir, averaged)


def smoothed(values, alpha=0.05):
    """Exponentially smoothed copy of a loss series."""
    out = np.empty(len(values))
    acc = None
    for i, value in enumerate(values):
        acc = value if acc is None else (1.0 - alpha) * acc + alpha * value
        out[i] = acc
    return out
