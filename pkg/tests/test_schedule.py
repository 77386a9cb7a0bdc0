import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import schedule
from errors import InvalidScheduleError, LevelOutOfRangeError
from forward import joint_covariance, posterior_coefficients
from records import read_csv

lambdas_strategy = st.lists(st.floats(min_value=0.3, max_value=0.999), min_size=2, max_size=200)


def test_linear_beta_single_level():
    s = schedule.make_linear_beta(1, 0.19, 0.0)
    assert s.T == 1
    assert s.lam(1) == pytest.approx(0.9, abs=1e-15)


def test_linear_beta_rejects_level_with_too_much_noise():
    with pytest.raises(InvalidScheduleError) as info:
        schedule.make_linear_beta(3, 0.5, 0.3)
    assert info.value.t == 3


def test_linear_beta_default_endpoint_matches_extended_precision_product():
    s = schedule.make_linear_beta(1000)
    assert s.signal(s.T) < 1e-2
    betas = 1e-4 + np.arange(1000, dtype=np.longdouble) * ((0.02 - 1e-4) / 999)
    direct = np.prod(np.sqrt(np.longdouble(1) - betas))
    assert s.signal(s.T) == pytest.approx(float(direct), rel=1e-12)


def test_linear_beta_end_sets_last_level():
    s = schedule.make_linear_beta(100, 1e-4, beta_end=0.2)
    assert 1.0 - s.lam(100) ** 2 == pytest.approx(0.2, rel=1e-12)
    assert s.signal(s.T) ** 2 < 1e-4
    again = schedule.from_dict({"kind": "linear_beta", "T": 100, "beta1": 1e-4, "beta_end": 0.2})
    assert np.array_equal(again.cum_lambdas, s.cum_lambdas)


def test_linear_beta_rejects_increment_and_end_together():
    with pytest.raises(InvalidScheduleError):
        schedule.make_linear_beta(10, 1e-4, 0.001, beta_end=0.02)


def test_quarter_cosine_two_levels():
    s = schedule.make_quarter_cosine(2)
    assert s.signal(1) == pytest.approx(math.cos(math.pi / 4), abs=1e-12)
    assert s.signal(2) == pytest.approx(1e-6, rel=1e-9)


def test_quarter_cosine_single_level_is_clip_floor():
    s = schedule.make_quarter_cosine(1)
    assert s.signal(1) == pytest.approx(1e-6, rel=1e-9)


@pytest.mark.parametrize("T", [1, 2, 3, 17, 1000, 3000, 10000])
def test_quarter_cosine_strictly_decreasing(T):
    cum = schedule.make_quarter_cosine(T).cum_lambdas
    assert np.all(np.diff(cum) < 0)


@pytest.mark.parametrize("T", [1000, 3000, 10000])
def test_quarter_cosine_first_level_follows_the_cosine(T):
    s = schedule.make_quarter_cosine(T)
    assert s.signal(1) == pytest.approx(math.cos(math.pi / (2 * T)), rel=1e-14)
    assert s.signal(1) < 1.0


def test_log_snr_linear_two_levels():
    s = schedule.make_log_snr_linear(2, 4.2632, 1.9078)
    assert s.lam(1) == pytest.approx(0.9, abs=1e-5)
    assert s.lam(2) == pytest.approx(0.9, abs=1e-5)


def test_log_snr_linear_needs_distinct_endpoints():
    with pytest.raises(InvalidScheduleError):
        schedule.make_log_snr_linear(1, 3.0, 3.0)
    with pytest.raises(InvalidScheduleError):
        schedule.make_log_snr_linear(4, 1.0, 2.0)


@pytest.mark.parametrize("T,snr_max,snr_min", [(2, 4.2632, 1.9078), (16, 50.0, 0.01), (300, 20.0, 1e-3)])
def test_log_snr_linear_reproduces_endpoints(T, snr_max, snr_min):
    s = schedule.make_log_snr_linear(T, snr_max, snr_min)
    assert schedule.snr(s, 1) == pytest.approx(snr_max, rel=1e-12)
    assert schedule.snr(s, T) == pytest.approx(snr_min, rel=1e-12)
    log_snr = np.log(s.snr_values)
    assert np.allclose(np.diff(log_snr), np.diff(log_snr)[0], rtol=0, atol=1e-9)


def test_snr_two_level_values(two_level):
    assert schedule.snr(two_level, 1) == pytest.approx(0.81 / 0.19, rel=1e-12)
    assert schedule.snr(two_level, 2) == pytest.approx(0.6561 / 0.3439, rel=1e-12)


def test_level_zero_conventions(two_level):
    assert two_level.signal(0) == 1.0
    assert two_level.noise_var(0) == 0.0
    assert math.isinf(two_level.snr_at(0))


@pytest.mark.parametrize("t", [0, 3, -1])
def test_snr_rejects_out_of_range_level(two_level, t):
    with pytest.raises(LevelOutOfRangeError):
        schedule.snr(two_level, t)


@pytest.mark.parametrize("bad", [[0.9, 1.0], [0.0, 0.5], [0.5, -0.2], [0.9, float("nan")]])
def test_invalid_lambda_names_level(bad):
    with pytest.raises(InvalidScheduleError) as info:
        schedule.Schedule(bad)
    assert info.value.t == next(i + 1 for i, v in enumerate(bad) if not 0 < v < 1)


def test_schedule_arrays_are_read_only(two_level):
    with pytest.raises(ValueError):
        two_level.lambdas[0] = 0.5


def test_standard_notation_round_trip(short_linear):
    notation = schedule.to_standard_notation(short_linear)
    assert np.allclose(notation["alpha"] + notation["beta"], 1.0, rtol=0, atol=1e-15)
    assert np.allclose(np.cumprod(notation["alpha"]), notation["alpha_bar"], rtol=1e-14)
    back = schedule.from_standard_notation(notation["alpha"])
    assert np.allclose(back.lambdas, short_linear.lambdas, rtol=0, atol=1e-15)


@pytest.mark.parametrize("descriptor", [
    {"kind": "linear_beta", "T": 10, "beta1": 0.001},
    {"kind": "quarter_cosine", "T": 5},
    {"kind": "log_snr_linear", "T": 6, "snr_max": 10.0, "snr_min": 0.1},
    {"kind": "custom", "lambdas": [0.9, 0.8, 0.7]},
])
def test_descriptor_round_trip(descriptor):
    s = schedule.from_dict(descriptor)
    again = schedule.from_dict(s.to_dict())
    assert np.array_equal(s.lambdas, again.lambdas)


def test_unknown_descriptor_kind():
    with pytest.raises(InvalidScheduleError):
        schedule.from_dict({"kind": "sigmoid", "T": 4})


def test_export_csv(tmp_path):
    s = schedule.make_linear_beta(1000)
    rows = read_csv(schedule.export_csv(s, tmp_path / "schedule.csv"))
    assert len(rows) == 1000
    assert list(rows[0]) == schedule.SCHEDULE_HEADER
    snr = np.array([float(r["snr"]) for r in rows])
    assert np.all(np.diff(snr) < 0)
    assert float(rows[0]["lambda"]) == s.lam(1)


@settings(max_examples=100, deadline=None)
@given(lambdas_strategy)
def test_closed_form_identities(lambdas):
    s = schedule.Schedule(lambdas)
    variance = 0.0
    for t in range(1, s.T + 1):
        # Telescoping conditional variance
        variance = s.lam(t) ** 2 * variance + s.noising_var(t)
        assert abs(variance - s.noise_var(t)) <= 1e-10

        coeffs = posterior_coefficients(s, t)
        # Tower property: E[x_{t-1} | x_0] is recovered from the posterior mean
        assert abs(coeffs.a + coeffs.b * s.signal(t) - s.signal(t - 1)) <= 1e-10
        # Total variance: Var[x_{t-1} | x_0] = var + b^2 Var[x_t | x_0]
        assert abs(coeffs.var + coeffs.b ** 2 * s.noise_var(t) - s.noise_var(t - 1)) <= 1e-10
        if t >= 2:
            assert coeffs.a ** 2 / coeffs.var == pytest.approx(s.snr_at(t - 1) - s.snr_at(t), rel=1e-9)

            cov = joint_covariance(s, [t - 1, 0, t])
            gain = np.linalg.solve(cov[1:, 1:], cov[1:, 0])
            assert abs(gain[0] - coeffs.a) <= 1e-10
            assert abs(gain[1] - coeffs.b) <= 1e-10
            assert abs(cov[0, 0] - cov[0, 1:] @ gain - coeffs.var) <= 1e-10
