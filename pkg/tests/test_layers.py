import math

import numpy as np
import pytest

from varigrad import _kernels_py, kernels
from varigrad.errors import ConfigurationError, DomainError, ShapeError
from varigrad.kl import Granularity
from varigrad.layers import (DenseVariationalLayer, EstimatorMode, NoiseType,
                             forward_binary_dropout, matched_alpha)
from varigrad.tensor import RngStream

MODES = list(EstimatorMode)
ADAPTIVE_CASES = [
    (NoiseType.TYPE_B, Granularity.PER_LAYER),
    (NoiseType.TYPE_B, Granularity.PER_INPUT_NEURON),
    (NoiseType.TYPE_B, Granularity.PER_WEIGHT),
    (NoiseType.TYPE_A, Granularity.PER_LAYER),
    (NoiseType.TYPE_A, Granularity.PER_INPUT_NEURON),
]


def make_layer(noise, gran=Granularity.PER_LAYER, K=4, L=3, alpha0=0.3, seed=1):
    layer = DenseVariationalLayer.init(K, L, noise, alpha0, RngStream(seed, 5), gran)
    if layer.adaptive:
        # spread log_alpha so per-unit gradients are distinguishable
        la = layer.posterior.log_alpha
        la[...] = math.log(alpha0) - 0.1 * np.arange(la.size).reshape(la.shape)
    layer.bias[:] = np.linspace(-0.2, 0.2, L)
    return layer


def test_init_ranges_and_shapes():
    layer = DenseVariationalLayer.init(16, 5, NoiseType.TYPE_B, 0.25, RngStream(0))
    assert layer.theta.shape == (16, 5)
    assert np.all(np.abs(layer.theta) <= 0.25)
    assert layer.posterior.log_alpha == pytest.approx(math.log(0.25))
    assert np.array_equal(layer.bias, np.zeros(5))


def test_deterministic_modes_agree(npr):
    A = npr.standard_normal((6, 4))
    for noise in NoiseType:
        layer = make_layer(noise) if noise is not NoiseType.BINARY else make_layer(noise)
        out, _ = layer.forward(A, EstimatorMode.NONE, None)
        np.testing.assert_allclose(out, A @ layer.theta + layer.bias)
    none_layer = make_layer(NoiseType.NONE)
    for mode in MODES:
        out, _ = none_layer.forward(A, mode, RngStream(0))
        np.testing.assert_allclose(out, A @ none_layer.theta + none_layer.bias)


def test_input_shape_error():
    with pytest.raises(ShapeError):
        make_layer(NoiseType.TYPE_B).forward(np.ones((2, 5)), EstimatorMode.LOCAL, RngStream(0))


@pytest.mark.parametrize("noise", [NoiseType.BINARY, NoiseType.GAUSSIAN_FIXED])
@pytest.mark.parametrize("mode", [EstimatorMode.PER_DATAPOINT, EstimatorMode.PER_MINIBATCH])
def test_weight_sampling_needs_variational_noise(noise, mode):
    layer = DenseVariationalLayer.init(4, 3, noise, 0.5, RngStream(0), dropout_p=0.3)
    with pytest.raises(ConfigurationError):
        layer.forward(np.ones((2, 4)), mode, RngStream(0))


def test_correlated_noise_rejects_per_weight_alpha():
    with pytest.raises(ConfigurationError):
        DenseVariationalLayer.init(4, 3, NoiseType.TYPE_A, 0.5, RngStream(0), Granularity.PER_WEIGHT)


@pytest.mark.parametrize("noise, gran", ADAPTIVE_CASES)
@pytest.mark.parametrize("mode", MODES)
def test_backward_matches_finite_differences(noise, gran, mode, npr):
    layer = make_layer(noise, gran)
    A = npr.standard_normal((5, 4))
    G = npr.standard_normal((5, 3))

    def objective():
        out, _ = layer.forward(A, mode, RngStream(11, 3))
        return float(np.sum(out * G))

    _, cache = layer.forward(A, mode, RngStream(11, 3))
    grads = layer.backward(cache, G)
    h = 1e-6
    targets = dict(layer.parameters())
    targets["A"] = A
    for key, arr in targets.items():
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = objective()
            flat[i] = orig - h
            down = objective()
            flat[i] = orig
            num[i] = (up - down) / (2 * h)
        np.testing.assert_allclose(np.ravel(grads[key]), num, rtol=1e-6, atol=1e-8,
                                   err_msg=f"{noise.value}/{gran.value}/{mode.value}: {key}")


def test_zero_input_row_gives_finite_local_gradients():
    layer = make_layer(NoiseType.TYPE_B)
    A = np.zeros((2, 4))
    A[1] = 1.0
    out, cache = layer.forward(A, EstimatorMode.LOCAL, RngStream(0))
    np.testing.assert_allclose(out[0], layer.bias)
    grads = layer.backward(cache, np.ones((2, 3)))
    assert all(np.all(np.isfinite(g)) for g in grads.values())


@pytest.mark.parametrize("noise", [NoiseType.TYPE_B, NoiseType.TYPE_A])
def test_activation_moments_match_closed_form(noise):
    # mean = A theta, variance = (A^2)(alpha theta^2) for every mode
    layer = make_layer(noise, alpha0=0.5)
    layer.bias[:] = 0.0
    A = np.array([[1.0, 0.5, -0.3, 2.0]])
    n = 40_000
    mean = A @ layer.theta
    alpha = layer.posterior.alpha
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    var = (A * A) @ (alpha * layer.theta ** 2)
    for mode in (EstimatorMode.LOCAL, EstimatorMode.PER_DATAPOINT):
        out, _ = layer.forward(np.repeat(A, n, axis=0), mode, RngStream(3, 9))
        sd = np.sqrt(var)
        assert np.all(np.abs(out.mean(axis=0) - mean) < 5 * sd / math.sqrt(n))
        assert np.all(np.abs(out.var(axis=0) / var - 1) < 5 * math.sqrt(2 / n))


def test_rows_share_noise_only_per_minibatch():
    layer = make_layer(NoiseType.TYPE_B)
    A = np.repeat(np.array([[0.3, -1.0, 0.8, 0.1]]), 3, axis=0)
    shared, _ = layer.forward(A, EstimatorMode.PER_MINIBATCH, RngStream(0))
    assert np.all(shared == shared[0])
    for mode in (EstimatorMode.LOCAL, EstimatorMode.PER_DATAPOINT):
        out, _ = layer.forward(A, mode, RngStream(0))
        assert not np.allclose(out[0], out[1])


@pytest.mark.skipif(kernels.BACKEND != "compiled", reason="compiled extension not built")
def test_per_datapoint_kernels_agree_across_backends(npr):
    cc = kernels.get_backend("compiled")
    A = npr.standard_normal((7, 5))
    theta = npr.standard_normal((5, 4))
    sa = np.sqrt(np.exp(npr.uniform(-3, 0, (5, 4))))
    dB = npr.standard_normal((7, 4))
    stream = (8, 2, 100, 10)
    np.testing.assert_allclose(_kernels_py.datapoint_forward(A, theta, sa, *stream),
                               cc.datapoint_forward(A, theta, sa, *stream), atol=1e-12)
    for a, b in zip(_kernels_py.datapoint_backward(A, theta, sa, dB, *stream),
                    cc.datapoint_backward(A, theta, sa, dB, *stream)):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_binary_dropout_and_matched_alpha(rng):
    A = np.ones((200, 50))
    out, mask = forward_binary_dropout(A, 0.5, rng)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert np.all((out == 0) | (out == 2.0))
    assert abs(out.mean() - 1.0) < 0.03
    assert matched_alpha(0.5) == 1.0
    assert matched_alpha(0.2) == pytest.approx(0.25)
    with pytest.raises(DomainError):
        matched_alpha(1.0)
    with pytest.raises(DomainError):
        forward_binary_dropout(A, -0.1, rng)


def test_binary_layer_has_no_adaptive_alpha():
    layer = DenseVariationalLayer.init(4, 3, NoiseType.BINARY, 1.0, RngStream(0), dropout_p=0.5)
    assert not layer.adaptive
    assert "log_alpha" not in layer.parameters()
    out, cache = layer.forward(np.ones((3, 4)), EstimatorMode.LOCAL, RngStream(0))
    grads = layer.backward(cache, np.ones((3, 3)))
    assert set(grads) == {"theta", "bias", "A"}
