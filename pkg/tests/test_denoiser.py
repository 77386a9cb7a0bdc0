import math

import numpy as np
import pytest

import denoiser
from autodiff import average, square, total
from denoiser import NOISING_VARIANCE, POSTERIOR_VARIANCE, PREDICT_EPS, PREDICT_X0
from errors import ConfigError, LevelOutOfRangeError, NonFiniteError, ShapeMismatchError, TrainingDivergenceError
from forward import posterior_coefficients


def test_level_embedding_values():
    emb = denoiser.level_embedding(0, 4, 10)
    assert np.array_equal(emb, np.array([0.0, 1.0, 0.0, 1.0]))
    emb = denoiser.level_embedding(3, 4, 10)
    assert emb[0] == pytest.approx(math.sin(3.0))
    assert emb[3] == pytest.approx(math.cos(3.0 * 10000.0 ** -0.5))


def test_level_embedding_rejects_odd_width():
    with pytest.raises(ConfigError):
        denoiser.level_embedding(1, 5, 10)


def test_init_params_shapes(make_net):
    params = make_net(data_dim=2, T=8, hidden=(16, 16), embed_dim=4)
    assert [W.shape for W in params.weights] == [(6, 16), (16, 16), (16, 2)]
    assert all(np.array_equal(b, np.zeros_like(b)) for b in params.biases)
    assert params.size == 6 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2


def test_flatten_unflatten(make_net):
    params = make_net()
    again = params.unflatten(params.flatten())
    for a, b in zip(params.arrays, again.arrays):
        assert np.array_equal(a, b)
    with pytest.raises(ShapeMismatchError):
        params.unflatten(np.zeros(params.size + 1))


def test_predict_shape_and_errors(make_net, rng):
    params = make_net(data_dim=2, T=5)
    x = rng.normal(size=(7, 2))
    assert denoiser.predict(params, x, 3).shape == (7, 2)
    with pytest.raises(ShapeMismatchError):
        denoiser.predict(params, rng.normal(size=(7, 3)), 3)
    with pytest.raises(LevelOutOfRangeError):
        denoiser.predict(params, x, 6)
    with pytest.raises(LevelOutOfRangeError):
        denoiser.predict(params, x, 0)


def test_non_finite_output_is_reported(make_net):
    params = make_net()
    arrays = params.arrays
    arrays[-1] = np.full_like(arrays[-1], np.inf)
    with pytest.raises(NonFiniteError):
        denoiser.predict(params.with_arrays(arrays), np.zeros((2, 1)), 1)


def test_mode_validation(make_net):
    with pytest.raises(ConfigError):
        make_net(mode="predict_score")
    with pytest.raises(ConfigError):
        make_net(variance_mode="learned")


@pytest.mark.parametrize("t", [1, 2])
def test_parameterisations_give_same_mean(two_level, rng, t):
    coeffs = posterior_coefficients(two_level, t)
    x_t = rng.normal(size=(5, 1))
    x0_hat = rng.normal(size=(5, 1))
    eps_hat = (x_t - coeffs.c * x0_hat) / coeffs.d
    mu_x0 = denoiser.mean_from_prediction(coeffs, x_t, x0_hat, PREDICT_X0)
    mu_eps = denoiser.mean_from_prediction(coeffs, x_t, eps_hat, PREDICT_EPS)
    assert np.allclose(mu_x0, mu_eps, rtol=1e-12, atol=1e-12)


def test_variance_options(two_level):
    c1, c2 = posterior_coefficients(two_level, 1), posterior_coefficients(two_level, 2)
    assert denoiser.variance_for_level(c2, two_level, 2, NOISING_VARIANCE) == pytest.approx(0.19)
    assert denoiser.variance_for_level(c2, two_level, 2, POSTERIOR_VARIANCE) == pytest.approx(c2.var)
    # posterior variance is 0 at t = 1; the noising variance is the floor
    assert denoiser.variance_for_level(c1, two_level, 1, POSTERIOR_VARIANCE) == pytest.approx(0.19)


def test_serialisation_round_trip(make_net, rng):
    params = make_net(mode=PREDICT_X0, variance_mode=POSTERIOR_VARIANCE)
    again = denoiser.from_dict(params.to_dict())
    x = rng.normal(size=(4, 1))
    assert np.array_equal(params.predict(x, 3), again.predict(x, 3))
    assert (again.mode, again.variance_mode) == (PREDICT_X0, POSTERIOR_VARIANCE)


def test_malformed_payload():
    with pytest.raises(ConfigError):
        denoiser.from_dict({"kind": "network", "layers": []})


def test_loss_and_gradient_layout(make_net, rng):
    params = make_net()
    x = rng.normal(size=(6, 1))

    def loss_fn(tracked):
        return average(square(tracked.predict(x, 2)))

    value, grad = denoiser.loss_and_gradient(params, loss_fn)
    assert value == pytest.approx(float(np.mean(params.predict(x, 2) ** 2)))
    assert [g.shape for g in grad.arrays] == [a.shape for a in params.arrays]


def test_loss_and_gradient_rejects_non_finite(make_net):
    params = make_net()

    def loss_fn(tracked):
        return total(tracked.nodes[0] * np.nan)

    with pytest.raises(TrainingDivergenceError):
        denoiser.loss_and_gradient(params, loss_fn)
