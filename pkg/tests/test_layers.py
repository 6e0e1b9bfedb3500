import math

import numpy as np
import pytest

from duncert import layers
from duncert import tensor as T
from duncert.layers import (DensityUncertaintyLayer, McDropoutLayer, MfviLinearLayer, Rank1BnnLayer,
                            VariationalDropoutLayer, build_network, network_forward, predictive_ensemble)
from duncert.tensor import DimensionError, Rng, Tensor

N_MC = 100_000


def _rep(h, n=N_MC):
    return Tensor(np.repeat(np.atleast_2d(np.asarray(h, dtype=float)), n, axis=0))


def _identity_density(D=2):
    layer = DensityUncertaintyLayer(D, D, Rng(0))
    layer.W.data = np.eye(D)
    layer.b.data = np.zeros(D)
    return layer


def test_density_mean_mode_identity():
    out = _identity_density().forward(Tensor([[1.0, 2.0]]), None, "mean")
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_density_vanishing_noise():
    layer = _identity_density()
    layer.log_gamma.data[:] = -20.0
    layer.log_beta.data[:] = -20.0
    h = Tensor([[1.0, 2.0]])
    np.testing.assert_allclose(layer.forward(h, Rng(1), "sample").data, [[1.0, 2.0]], atol=1e-3)


def test_density_variance_law_example():
    # E(h) = 2 with an identity energy at h = (2, 0)
    layer = _identity_density()
    layer.log_gamma.data[:] = math.log(0.5)
    layer.log_beta.data[:] = math.log(0.1)
    h = np.array([2.0, 0.0])
    assert layer.energy.energy(h).item() == pytest.approx(2.0)
    np.testing.assert_allclose(layer.predictive_variance(h), [1.1, 1.1], rtol=1e-12)
    with T.no_grad():
        a = layer.forward(_rep(h), Rng(2), "sample").data
    np.testing.assert_allclose(a.var(axis=0, ddof=1), 1.1, rtol=0.02)


def test_predictive_variance_closed_form():
    layer = _identity_density()
    layer.log_gamma.data[:] = 0.0
    layer.log_beta.data[:] = math.log(0.3)
    np.testing.assert_allclose(layer.predictive_variance(np.zeros(2)), [0.3, 0.3], rtol=1e-15)
    layer.log_beta.data[:] = -800.0  # beta underflows to exactly 0
    np.testing.assert_allclose(layer.predictive_variance(np.array([2.0, 0.0])), [2.0, 2.0], rtol=1e-15)


def test_density_dimension_error():
    with pytest.raises(DimensionError, match="du_forward"):
        _identity_density().forward(Tensor(np.zeros((1, 3))), Rng(0))


def test_mfvi_examples():
    layer = MfviLinearLayer(1, 1, Rng(0))
    layer.W.data[:] = 1.0
    layer.b.data[:] = 0.0
    h = Tensor([[1.0]])
    assert layer.forward(h, None, "mean").item() == 1.0
    layer.W_logstd.data[:] = -20.0
    layer.b_logstd.data[:] = -20.0
    assert layer.forward(h, Rng(1)).item() == pytest.approx(1.0, abs=1e-3)
    # weight std sigma and a negligible bias std: output variance sigma^2
    sigma = 0.3
    layer.W_logstd.data[:] = math.log(sigma)
    with T.no_grad():
        rng = Rng(2)
        draws = np.array([layer.forward(h, rng).item() for _ in range(N_MC)])
    assert draws.var(ddof=1) == pytest.approx(sigma ** 2, rel=0.02)


def test_mfvi_shares_one_draw_across_the_batch():
    layer = MfviLinearLayer(1, 1, Rng(0), init_std=0.5)
    out = layer.forward(Tensor(np.ones((4, 1))), Rng(3)).data
    assert np.all(out == out[0])


def test_vdropout_examples():
    layer = VariationalDropoutLayer(2, 1, Rng(0), alpha_noise=0.2)
    layer.W.data = np.array([[1.0, -1.0]])
    layer.b.data[:] = 0.0
    zero = layer.forward(Tensor([[3.0, 3.0]]), Rng(1)).data
    assert np.all(zero == 0.0)
    with T.no_grad():
        a = layer.forward(_rep([1.5, 0.0]), Rng(2)).data
    assert a.var(ddof=1) == pytest.approx(0.2 * 1.5 ** 2, rel=0.02)
    tiny = VariationalDropoutLayer(2, 1, Rng(0), alpha_noise=1e-24)
    h = Tensor([[0.3, 0.4]])
    np.testing.assert_allclose(tiny.forward(h, Rng(3)).data, tiny.forward(h, None, "mean").data, rtol=1e-11)
    with pytest.raises(ValueError):
        VariationalDropoutLayer(2, 1, Rng(0), alpha_noise=0.0)


def test_rank1_examples():
    layer = Rank1BnnLayer(1, 1, Rng(0))
    layer.in_logstd.data[:] = -30.0
    layer.out_logstd.data[:] = -30.0
    h = Tensor([[0.7]])
    det = (0.7 * layer.W.data + layer.b.data).item()
    assert layer.forward(h, Rng(1)).item() == pytest.approx(det, abs=1e-12)
    assert layer.forward(Tensor([[0.0]]), None, "mean").item() == layer.b.data.item()


def test_rank1_variance_matches_product_of_gaussians():
    layer = Rank1BnnLayer(1, 1, Rng(0), init_std=0.3)
    layer.W.data[:] = 2.0
    layer.b.data[:] = 0.5
    x = 1.0
    with T.no_grad():
        a = layer.forward(_rep([x]), Rng(4)).data.ravel()
    # u = 2 s_in + 0.5 with s_in ~ N(1, 0.09); a = u * s_out with s_out ~ N(1, 0.09)
    mu_u, var_u, mu_s, var_s = 2.5, 4 * 0.09, 1.0, 0.09
    exact = var_u * var_s + var_u * mu_s ** 2 + var_s * mu_u ** 2
    assert a.var(ddof=1) == pytest.approx(exact, rel=0.03)


def test_mcdropout_examples():
    layer = McDropoutLayer(3, 2, Rng(0), p=0.0)
    h = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    np.testing.assert_array_equal(layer.forward(h, Rng(1)).data, layer.forward(h, None, "mean").data)
    layer = McDropoutLayer(3, 2, Rng(0), p=0.3)
    one = Tensor([[0.5, -1.0, 2.0]])
    with T.no_grad():
        a = layer.forward(_rep(one.data), Rng(2)).data
    np.testing.assert_allclose(a.mean(axis=0), layer.forward(one, None, "mean").data[0], rtol=0.02)
    with pytest.raises(ValueError):
        McDropoutLayer(3, 2, Rng(0), p=1.0)


def test_mcdropout_mask_count():
    layer = McDropoutLayer(50, 50, Rng(0), p=0.1)
    layer.W.data, layer.b.data = np.eye(50), np.zeros(50)
    with T.no_grad():
        out = layer.forward(Tensor(np.ones((20_000, 50))), Rng(5)).data
    assert np.mean(np.sum(out == 0.0, axis=1)) == pytest.approx(5.0, abs=0.05)


def test_network_single_identity_layer():
    layer = DensityUncertaintyLayer(3, 3, Rng(0))
    layer.W.data, layer.b.data = np.eye(3), np.zeros(3)
    net = layers.StochasticMlp([layer])
    x = np.random.default_rng(1).normal(size=(5, 3))
    np.testing.assert_array_equal(network_forward(net, x, None, "mean").output.data, x)


def test_residual_identity_with_zeroed_branches():
    net = build_network("density", 3, 1, [4, 4, 4], seed=0, residual=True)
    for layer in net.layers[1:]:
        layer.W.data[:] = 0.0
        layer.b.data[:] = 0.0
        layer.log_gamma.data[:] = -800.0
        layer.log_beta.data[:] = -800.0
    x = np.random.default_rng(2).normal(size=(5, 3))
    a1 = net.layers[0].forward(Tensor(x), None, "mean").data
    np.testing.assert_array_equal(network_forward(net, x, None, "mean").output.data, a1)


def test_residual_width_violation():
    with pytest.raises(DimensionError, match="residual"):
        build_network("mfvi", 3, 1, [4, 5], residual=True)


@pytest.mark.parametrize("method", layers.METHODS)
def test_forward_is_deterministic_given_seed(method):
    x = np.random.default_rng(3).normal(size=(8, 2))
    outs = [network_forward(build_network(method, 2, 1, [50, 50], seed=4), x, Rng(9)).output.data for _ in range(2)]
    np.testing.assert_array_equal(outs[0], outs[1])


@pytest.mark.parametrize("method", layers.METHODS)
def test_mean_mode_equals_affine_composition(method):
    net = build_network(method, 2, 1, [5], seed=1)
    x = np.random.default_rng(4).normal(size=(3, 2))
    # rank-1 factor means start at 1, so every method reduces to relu(x W1' + b1) W2' + b2
    h = np.maximum(x @ net.layers[0].W.data.T + net.layers[0].b.data, 0)
    ref = h @ net.layers[1].W.data.T + net.layers[1].b.data
    np.testing.assert_allclose(network_forward(net, x, None, "mean").output.data, ref, rtol=1e-13)


def test_network_trace_and_dimension_errors():
    net = build_network("density", 2, 1, [3, 3], seed=0)
    tr = network_forward(net, np.zeros((4, 2)), Rng(0))
    assert [a.shape for a in tr.activations] == [(4, 2), (4, 3), (4, 3)]
    assert all(e.shape == (4,) for e in tr.energies)
    with pytest.raises(DimensionError):
        network_forward(net, np.zeros((4, 3)), Rng(0))
    assert network_forward(build_network("mfvi", 2, 1, [3]), np.zeros((1, 2)), Rng(0)).energies == []


def test_predictive_ensemble():
    net = build_network("density", 2, 1, [5], seed=0)
    x = np.random.default_rng(5).normal(size=(3, 2))
    one = predictive_ensemble(net, x, Rng(7), 1)
    np.testing.assert_array_equal(one[0], network_forward(net, x, Rng(7)).output.data)
    for layer in net.layers:
        layer.log_gamma.data[:] = -800.0
        layer.log_beta.data[:] = -800.0
    many = predictive_ensemble(net, x, Rng(8), 4)
    assert many.shape == (4, 3, 1) and np.all(many == many[0])
    with pytest.raises(ValueError):
        predictive_ensemble(net, x, Rng(0), 0)


def test_energy_parameters_receive_no_discriminative_gradient():
    net = build_network("density", 2, 1, [4], seed=0)
    x = Tensor(np.random.default_rng(6).normal(size=(5, 2)))
    with T.Tape() as tape:
        tape.backward(T.tsum(T.square(network_forward(net, x, Rng(1)).output)))
    assert all(p.grad is None or not np.any(p.grad) for p in net.energy_parameters().values())
    assert np.any(net.layers[0].W.grad)


def test_density_variance_grows_with_energy():
    net = build_network("density", 1, 1, [8], seed=0, activation="tanh")
    grid = np.linspace(-3, 3, 13)[:, None]
    for layer in net.layers:
        layer.energy.log_d.data[:] = 1.0
    samples = predictive_ensemble(net, grid, Rng(3), 2000)[..., 0]
    with T.no_grad():
        energies = sum(e.data for e in network_forward(net, grid, None, "mean").energies)
    from scipy.stats import spearmanr
    assert spearmanr(energies, samples.var(axis=0)).statistic > 0.9
