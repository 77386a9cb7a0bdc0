import math

import numpy as np
import pytest

import datasets
import denoiser
import objectives
from denoiser import NOISING_VARIANCE, POSTERIOR_VARIANCE, PREDICT_EPS, PREDICT_X0
from errors import ConfigError, ModeMismatchError
from forward import posterior_coefficients
from objectives import WeightScheme
from oracles import LinearPredictor, MixtureOracle, UnitGaussianOracle, ZeroPredictor
from schedule import Schedule


@pytest.fixture
def four_level():
    return Schedule([0.95, 0.9, 0.85, 0.8])


def fresh(seed):
    return np.random.default_rng(seed)


def test_naive_loss_matches_entropy_for_reversible_oracle(four_level, rng):
    model = UnitGaussianOracle(four_level)
    x0 = rng.standard_normal((200000, 1))
    t = 3
    est = objectives.naive_level_loss(model, four_level, t, x0, rng)
    expected = 0.5 * math.log(2 * math.pi * math.e * four_level.noising_var(t))
    assert abs(est.value - expected) < 4 * est.stderr


def test_naive_loss_with_zero_residual(four_level, rng):
    model = ZeroPredictor(four_level, 1, PREDICT_X0, NOISING_VARIANCE)
    est = objectives.naive_level_loss(model, four_level, 1, np.zeros((10, 1)), rng)
    assert est.value == pytest.approx(0.5 * math.log(2 * math.pi * four_level.noising_var(1)), rel=1e-12)
    assert est.levels == (1,)
    assert est.batch == 10


def test_same_seed_is_bit_identical(four_level, make_net):
    params = make_net(T=4)
    x0 = datasets.sample_data(datasets.gmm1d(), 64, fresh(1))
    a = objectives.naive_level_loss(params, four_level, 2, x0, fresh(2))
    b = objectives.naive_level_loss(params, four_level, 2, x0, fresh(2))
    assert a.value == b.value
    assert np.array_equal(a.rows, b.rows)


def test_rao_blackwell_with_exact_posterior_mean(four_level, rng):
    # point-mass data at 0 makes the posterior mean b * x_t, which a zero x0-predictor reproduces
    model = ZeroPredictor(four_level, 1, PREDICT_X0, POSTERIOR_VARIANCE)
    est = objectives.rao_blackwell_level_loss(model, four_level, 2, np.zeros((16, 1)), rng)
    var = posterior_coefficients(four_level, 2).var
    assert est.value == pytest.approx(0.5 * (1.0 + math.log(2 * math.pi * var)), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_naive_and_rao_blackwell_agree_and_rb_has_lower_variance(seed, make_net):
    config = np.random.default_rng(seed)
    T = int(config.integers(2, 9))
    s = Schedule(config.uniform(0.6, 0.98, size=T))
    t = int(config.integers(2, T + 1))
    mode = (PREDICT_EPS, PREDICT_X0)[seed % 2]
    variance_mode = (NOISING_VARIANCE, POSTERIOR_VARIANCE)[(seed // 2) % 2]
    params = make_net(T=T, seed=seed, mode=mode, variance_mode=variance_mode)
    spec = (datasets.unit_gaussian(), datasets.gmm1d())[seed % 2]
    x0 = datasets.sample_data(spec, 100000, fresh([seed, 0]))

    naive = objectives.naive_level_loss(params, s, t, x0, fresh([seed, 1]))
    rb = objectives.rao_blackwell_level_loss(params, s, t, x0, fresh([seed, 2]))
    combined = math.hypot(naive.stderr, rb.stderr)
    assert abs(naive.value - rb.value) < 4 * combined
    assert np.var(rb.rows) < np.var(naive.rows)


def test_tied_objective_single_level(rng):
    s = Schedule([0.9])
    x0 = rng.standard_normal((32, 1))
    model = ZeroPredictor(s, 1, PREDICT_EPS, NOISING_VARIANCE)
    tied = objectives.tied_objective(model, s, WeightScheme("custom", [2.5]), x0, fresh(3))
    replay = fresh(3)
    replay.integers(1, 2, size=1)
    rb = objectives.rao_blackwell_level_loss(model, s, 1, x0, replay)
    assert tied.value == pytest.approx(2.5 * rb.value, rel=1e-13)


def test_unit_weights_give_unweighted_loss_sum(short_linear, rng):
    model = LinearPredictor(short_linear, np.linspace(0.9, 0.1, 8))
    x0 = rng.standard_normal((128, 1))
    tied = objectives.tied_objective(model, short_linear, WeightScheme(), x0, fresh(5), exhaustive=True)
    replay = fresh(5)
    total = sum(objectives.rao_blackwell_level_loss(model, short_linear, t, x0, replay).value for t in range(1, 9))
    assert tied.value == pytest.approx(total, rel=1e-13)
    assert tied.levels == tuple(range(1, 9))


@pytest.mark.parametrize("level_sampling", ["uniform", "weighted"])
def test_tied_objective_is_unbiased(short_linear, level_sampling):
    s = short_linear
    weights = WeightScheme("custom", list(np.linspace(0.5, 3.0, s.T)))
    model = LinearPredictor(s, np.linspace(0.95, 0.05, s.T))
    spec = datasets.gmm1d()

    exact = objectives.tied_objective(model, s, weights, datasets.sample_data(spec, 400000, fresh(0)), fresh(1),
                                      exhaustive=True)
    values = []
    for seed in range(3000):
        rng = fresh([seed, 9])
        x0 = datasets.sample_data(spec, 32, rng)
        values.append(objectives.tied_objective(model, s, weights, x0, rng, levels_per_step=2,
                                                level_sampling=level_sampling).value)
    values = np.array(values)
    se = math.hypot(values.std(ddof=1) / math.sqrt(values.size), exact.stderr)
    assert abs(values.mean() - exact.value) < 4 * se


def test_cancelling_weight_example(two_level):
    coeffs = posterior_coefficients(two_level, 2)
    kappa = (coeffs.a * coeffs.d / coeffs.c) ** 2
    assert kappa == pytest.approx(0.1296, abs=1e-5)
    assert objectives.cancelling_weight(two_level, 2) == pytest.approx(0.19 / kappa, rel=1e-12)
    assert objectives.cancelling_weight(two_level, 2) == pytest.approx(1.46605, abs=1e-4)


def test_simplified_loss_is_zero_for_exact_noise(four_level, rng):
    spec = datasets.point_mass()
    model = MixtureOracle(spec, four_level, PREDICT_EPS)
    est = objectives.simplified_ddpm_loss(model, four_level, np.zeros((64, 1)), rng, levels_per_step=4)
    assert est.value == pytest.approx(0.0, abs=1e-24)


def test_simplified_loss_needs_eps_mode(four_level, make_net, rng):
    params = make_net(T=4, mode=PREDICT_X0)
    with pytest.raises(ModeMismatchError):
        objectives.simplified_ddpm_loss(params, four_level, np.zeros((4, 1)), rng)


@pytest.mark.parametrize("seed", range(5))
def test_simplified_equals_cancelling_weighted_rb_up_to_constant(four_level, make_net, seed):
    a = make_net(T=4, seed=seed)
    b = make_net(T=4, seed=seed + 100)
    x0 = datasets.sample_data(datasets.gmm1d(), 256, fresh([seed, 0]))
    weights = WeightScheme("simplified_cancelling")

    def gap(params):
        tied = objectives.tied_objective(params, four_level, weights, x0, fresh([seed, 1]), levels_per_step=3)
        simple = objectives.simplified_ddpm_loss(params, four_level, x0, fresh([seed, 1]), levels_per_step=3)
        assert tied.levels == simple.levels
        return tied.value - simple.value

    assert gap(a) == pytest.approx(gap(b), abs=1e-9)


def test_vdm_weight_example(two_level):
    assert objectives.vdm_weight(two_level, 2) == pytest.approx(4.26316 - 1.90782, abs=1e-5)
    assert objectives.vdm_weight(two_level, 2) == pytest.approx(2.35534, abs=1e-5)
    coeffs = posterior_coefficients(two_level, 2)
    assert objectives.vdm_weight(two_level, 2) == pytest.approx(coeffs.a ** 2 / coeffs.var, rel=1e-12)
    assert objectives.vdm_weight(two_level, 1) == pytest.approx(1.0 / 0.19, rel=1e-14)


def test_vdm_loss_is_zero_for_exact_clean_prediction(four_level, rng):
    spec = datasets.point_mass()
    model = MixtureOracle(spec, four_level, PREDICT_X0, POSTERIOR_VARIANCE)
    est = objectives.vdm_loss(model, four_level, np.zeros((64, 1)), rng, levels_per_step=4)
    assert est.value == pytest.approx(0.0, abs=1e-20)


def test_vdm_needs_x0_mode_and_posterior_variance(four_level, make_net, rng):
    for mode, variance_mode in ((PREDICT_EPS, POSTERIOR_VARIANCE), (PREDICT_X0, NOISING_VARIANCE)):
        with pytest.raises(ModeMismatchError):
            objectives.vdm_loss(make_net(T=4, mode=mode, variance_mode=variance_mode), four_level,
                                np.zeros((4, 1)), rng)


@pytest.mark.parametrize("seed", range(5))
def test_vdm_equals_unweighted_rb_up_to_constant(four_level, make_net, seed):
    kwargs = dict(T=4, mode=PREDICT_X0, variance_mode=POSTERIOR_VARIANCE)
    a, b = make_net(seed=seed, **kwargs), make_net(seed=seed + 100, **kwargs)
    x0 = datasets.sample_data(datasets.unit_gaussian(), 256, fresh([seed, 0]))

    def gap(params):
        tied = objectives.tied_objective(params, four_level, WeightScheme(), x0, fresh([seed, 1]), levels_per_step=3)
        vdm = objectives.vdm_loss(params, four_level, x0, fresh([seed, 1]), levels_per_step=3)
        return tied.value - vdm.value

    assert gap(a) == pytest.approx(gap(b), abs=1e-9)


def test_elbo_single_level_matches_true_log_likelihood(rng):
    s = Schedule([0.6])
    model = UnitGaussianOracle(s)
    est = objectives.elbo(model, s, rng.standard_normal((200000, 1)), rng)
    assert abs(est.maximised + 0.5 * math.log(2 * math.pi * math.e)) < 4 * est.stderr


def test_linear_gaussian_likelihood_of_reversible_chain(rng):
    s = Schedule([0.8, 0.7, 0.6])
    model = LinearPredictor(s, s.cum_lambdas)
    x0 = rng.standard_normal((10, 1))
    expected = -0.5 * (x0[:, 0] ** 2 + math.log(2 * math.pi))
    assert np.allclose(objectives.linear_gaussian_log_likelihood(model, x0), expected, rtol=1e-12)


def test_elbo_is_below_exact_log_likelihood(rng):
    s = Schedule([0.8, 0.7, 0.6])
    model = LinearPredictor(s, [0.3, 0.5, 0.2])
    x0 = rng.standard_normal((200000, 1))
    bound = objectives.elbo(model, s, x0, rng)
    exact = objectives.linear_gaussian_log_likelihood(model, x0)
    slack = exact - (-bound.rows)
    assert slack.mean() > -4 * slack.std(ddof=1) / math.sqrt(slack.size)
    assert slack.mean() > 0


def test_elbo_minus_trajectory_loss_is_parameter_free(four_level, make_net):
    x0 = datasets.sample_data(datasets.gmm1d(), 512, fresh(0))
    differences = []
    for seed in (1, 2):
        params = make_net(T=4, seed=seed)
        e = objectives.elbo(params, four_level, x0, fresh(7))
        loss = objectives.trajectory_ddpm_loss(params, four_level, x0, fresh(7))
        differences.append(e.maximised + loss.value)
    assert differences[0] == pytest.approx(differences[1], abs=1e-10)


def test_entropy_constant(four_level):
    expected = 2 * sum(0.5 * math.log(2 * math.pi * math.e * (1 - lam ** 2)) for lam in (0.95, 0.9, 0.85, 0.8))
    assert objectives.entropy_constant(four_level, 2) == pytest.approx(expected, rel=1e-12)


def test_weight_scheme_validation(two_level):
    with pytest.raises(ConfigError):
        WeightScheme("custom", [1.0, -1.0])
    with pytest.raises(ConfigError):
        WeightScheme("learned")
    with pytest.raises(ConfigError):
        WeightScheme("custom", [1.0, 2.0, 3.0]).values_for(two_level)
    assert np.array_equal(WeightScheme().values_for(two_level), np.ones(2))
    assert WeightScheme("custom", [1, 2]).to_dict() == {"kind": "custom", "values": [1.0, 2.0]}


def test_compatibility_checks():
    objectives.check_compatibility("simplified_ddpm", PREDICT_EPS, NOISING_VARIANCE)
    objectives.check_compatibility("vdm", PREDICT_X0, POSTERIOR_VARIANCE)
    with pytest.raises(ConfigError):
        objectives.check_compatibility("simplified_ddpm", PREDICT_X0, NOISING_VARIANCE)
    with pytest.raises(ConfigError):
        objectives.check_compatibility("vdm", PREDICT_X0, NOISING_VARIANCE)
    with pytest.raises(ConfigError):
        objectives.check_compatibility("score_matching", PREDICT_EPS, NOISING_VARIANCE)


def _modes_for(variant, seed):
    if variant == "simplified_ddpm":
        return PREDICT_EPS, NOISING_VARIANCE
    if variant == "vdm":
        return PREDICT_X0, POSTERIOR_VARIANCE
    return ((PREDICT_EPS, NOISING_VARIANCE), (PREDICT_X0, POSTERIOR_VARIANCE))[seed % 2]


@pytest.mark.parametrize("variant", objectives.VARIANTS)
@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(four_level, make_net, variant, seed):
    mode, variance_mode = _modes_for(variant, seed)
    params = make_net(T=4, seed=seed, hidden=(20, 16), embed_dim=4, mode=mode, variance_mode=variance_mode)
    assert 450 <= params.size <= 550
    x0 = datasets.sample_data(datasets.gmm1d(), 8, fresh([seed, 0]))

    def loss(model):
        return objectives.objective(variant, model, four_level, x0, fresh([seed, 1]), levels_per_step=2)

    _, grad = denoiser.loss_and_gradient(params, lambda tracked: loss(tracked).node)
    flat = params.flatten()
    numeric = np.empty_like(flat)
    h = 1e-6
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (loss(params.unflatten(up)).value - loss(params.unflatten(down)).value) / (2 * h)
    np.testing.assert_allclose(grad.flatten(), numeric, rtol=1e-4, atol=1e-7)
