"""
Augmentation coefficients {lambda_t} and everything derived from them.

A Schedule is built once and never modified; every other module reads the
cached arrays below instead of recomputing products inside loops.

    x_t = lambda_t * x_{t-1} + sqrt(1 - lambda_t^2) * eps

Arrays indexed by level use position 0 for t = 0 (no noise), so
signal(0) = 1, noise_var(0) = 0 and snr_at(0) = inf.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from constants import CLIP_EPS, DEFAULT_BETA1, DEFAULT_BETA_END
from errors import InvalidScheduleError, LevelOutOfRangeError
from records import write_csv

KINDS = ("linear_beta", "quarter_cosine", "log_snr_linear", "custom")


@dataclass(frozen=True, eq=False)
class Schedule:
    lambdas: np.ndarray
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        lambdas = np.array(self.lambdas, dtype=np.float64).reshape(-1)
        if lambdas.size < 1:
            raise InvalidScheduleError("Schedule needs at least one level")
        for t, lam in enumerate(lambdas, start=1):
            if not (0.0 < lam < 1.0):
                raise InvalidScheduleError(f"lambda={lam!r} must lie strictly inside (0, 1)", t=t)

        log_cum = np.cumsum(np.log(lambdas))
        # Left-fold product; 1 - Lambda^2 via expm1 keeps precision when Lambda is near 1
        signal = np.concatenate(([1.0], np.cumprod(lambdas)))
        noise = np.concatenate(([0.0], -np.expm1(2.0 * log_cum)))
        with np.errstate(divide="ignore"):
            snr = np.concatenate(([math.inf], signal[1:] ** 2 / noise[1:]))
        if np.any(np.diff(snr[1:]) >= 0):
            bad = int(np.argmax(np.diff(snr[1:]) >= 0)) + 2
            raise InvalidScheduleError("SNR must strictly decrease", t=bad)

        lambdas.setflags(write=False)
        for name, value in (("_signal", signal), ("_noise", noise), ("_snr", snr)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "sigma2", _frozen(1.0 - lambdas ** 2))
        object.__setattr__(self, "params", dict(self.params))

    @property
    def T(self):
        return int(self.lambdas.size)

    @property
    def cum_lambdas(self):
        """Lambda_1..Lambda_T."""
        return self._signal[1:]

    @property
    def snr_values(self):
        """SNR(1)..SNR(T)."""
        return self._snr[1:]

    def check_level(self, t, low=1):
        if not (low <= t <= self.T) or int(t) != t:
            raise LevelOutOfRangeError(t, low, self.T)
        return int(t)

    def lam(self, t):
        return float(self.lambdas[self.check_level(t) - 1])

    def noising_var(self, t):
        """sigma_t^2 = 1 - lambda_t^2."""
        return float(self.sigma2[self.check_level(t) - 1])

    def signal(self, t):
        """Lambda_t, the weight on x_0 in q(x_t | x_0)."""
        return float(self._signal[self.check_level(t, low=0)])

    def noise_var(self, t):
        """1 - Lambda_t^2, the variance of q(x_t | x_0)."""
        return float(self._noise[self.check_level(t, low=0)])

    def snr_at(self, t):
        return float(self._snr[self.check_level(t, low=0)])

    def to_dict(self):
        payload = {"kind": self.kind, "T": self.T}
        payload.update(self.params)
        if self.kind == "custom":
            payload["lambdas"] = self.lambdas.tolist()
        return payload

    def describe(self):
        extra = ", ".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}(T={self.T}{', ' + extra if extra else ''})"


def _frozen(array):
    array = np.asarray(array, dtype=np.float64)
    array.setflags(write=False)
    return array


def make_linear_beta(T, beta1=DEFAULT_BETA1, beta2=None, beta_end=None):
    """
    1 - lambda_t^2 = beta1 + (t - 1) * beta2.

    Without beta2 the increment is chosen so 1 - lambda_T^2 = beta_end
    (0.02 unless given).
    """
    T = _check_T(T)
    if beta2 is not None and beta_end is not None:
        raise InvalidScheduleError("Give either beta2 or beta_end, not both")
    if beta2 is None:
        end = DEFAULT_BETA_END if beta_end is None else beta_end
        beta2 = 0.0 if T == 1 else (end - beta1) / (T - 1)
    if not beta1 > 0:
        raise InvalidScheduleError(f"beta1={beta1!r} must be positive", t=1)
    betas = beta1 + np.arange(T) * beta2
    for t, beta in enumerate(betas, start=1):
        if not (0.0 < beta < 1.0):
            raise InvalidScheduleError(f"1 - lambda^2 = {beta!r} outside (0, 1)", t=t)
    return Schedule(np.sqrt(1.0 - betas), kind="linear_beta", params={"beta1": float(beta1), "beta2": float(beta2)})


def make_quarter_cosine(T, clip=CLIP_EPS):
    """Lambda_t = cos(t / T * pi / 2), floored at clip.

    Only the floor is applied. cos(pi / 2T) stays below 1 in double precision
    for T up to about 1e7, so the top of the chain has no ties.
    """
    T = _check_T(T)
    t = np.arange(1, T + 1)
    cum = np.maximum(np.cos(t / T * np.pi / 2.0), clip)
    return Schedule(_ratios(cum), kind="quarter_cosine", params={"clip": float(clip)})


def make_log_snr_linear(T, snr_max, snr_min):
    """log SNR(t) linear from log snr_max at t=1 to log snr_min at t=T."""
    T = _check_T(T)
    if not (snr_max > snr_min > 0):
        raise InvalidScheduleError(f"Need snr_max > snr_min > 0, got {snr_max!r}, {snr_min!r}")
    if T < 2:
        raise InvalidScheduleError("log-SNR-linear spacing needs T >= 2 to hit both endpoints", t=T)
    log_snr = np.linspace(math.log(snr_max), math.log(snr_min), T)
    # Lambda^2 = snr / (1 + snr)
    cum = np.sqrt(expit(log_snr))
    return Schedule(_ratios(cum), kind="log_snr_linear", params={"snr_max": float(snr_max), "snr_min": float(snr_min)})


def _ratios(cum):
    previous = np.concatenate(([1.0], cum[:-1]))
    return cum / previous


def _check_T(T):
    if int(T) != T or T < 1:
        raise InvalidScheduleError(f"T={T!r} must be a positive integer")
    return int(T)


def snr(s, t):
    return s.snr_at(s.check_level(t))


def to_standard_notation(s):
    """alpha_t = lambda_t^2, beta_t = 1 - lambda_t^2, alpha_bar_t = Lambda_t^2."""
    alpha = s.lambdas ** 2
    return {"alpha": alpha, "beta": s.sigma2.copy(), "alpha_bar": s.cum_lambdas ** 2}


def from_standard_notation(alpha):
    return Schedule(np.sqrt(np.asarray(alpha, dtype=np.float64)), kind="custom")


def from_dict(descriptor):
    descriptor = dict(descriptor)
    kind = descriptor.pop("kind", None)
    if kind not in KINDS:
        raise InvalidScheduleError(f"Unknown schedule kind {kind!r}; expected one of {KINDS}")
    T = descriptor.pop("T", None)
    try:
        if kind == "linear_beta":
            return make_linear_beta(T, descriptor.get("beta1", DEFAULT_BETA1), descriptor.get("beta2"),
                                    descriptor.get("beta_end"))
        if kind == "quarter_cosine":
            return make_quarter_cosine(T, descriptor.get("clip", CLIP_EPS))
        if kind == "log_snr_linear":
            return make_log_snr_linear(T, descriptor["snr_max"], descriptor["snr_min"])
        lambdas = descriptor["lambdas"]
    except KeyError as exc:
        raise InvalidScheduleError(f"Schedule descriptor missing field {exc}") from exc
    except TypeError as exc:
        raise InvalidScheduleError(f"Malformed schedule descriptor: {exc}") from exc
    s = Schedule(lambdas, kind="custom")
    if T is not None and T != s.T:
        raise InvalidScheduleError(f"T={T} does not match {s.T} lambdas")
    return s


def schedule_rows(s):
    for t in range(1, s.T + 1):
        value = s.snr_at(t)
        yield [t, s.lam(t), s.signal(t), s.noising_var(t), value, math.log(value)]


SCHEDULE_HEADER = ["t", "lambda", "Lambda", "sigma2", "snr", "log_snr"]


def export_csv(s, path):
    return write_csv(path, SCHEDULE_HEADER, schedule_rows(s))
