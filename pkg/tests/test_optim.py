import math

import numpy as np
import pytest

from varigrad.errors import OptimizerError
from varigrad.optim import Adam


def params():
    return {"layer0.theta": np.array([[0.5, -1.0]]), "layer0.bias": np.array([0.1]),
            "layer0.log_alpha": np.array(-0.5)}


def zeros_like(p):
    return {k: np.zeros_like(v) for k, v in p.items()}


def test_zero_gradient_leaves_params():
    p = params()
    before = {k: v.copy() for k, v in p.items()}
    Adam().step(p, zeros_like(p))
    for k in p:
        assert np.array_equal(p[k], before[k])


def test_first_step_moves_by_learning_rate():
    p = {"w": np.array([0.0, 2.0])}
    Adam(lr=1e-3).step(p, {"w": np.array([1.0, -1.0])})
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    expected = 1e-3 * 1.0 / (1.0 + 1e-8)
    np.testing.assert_allclose(p["w"], [expected, 2.0 - expected], rtol=0, atol=1e-15)


def test_log_alpha_clipped_to_zero():
    p = {"layer0.log_alpha": np.array(-0.0005)}
    Adam(lr=0.3).step(p, {"layer0.log_alpha": np.array(1.0)})
    assert p["layer0.log_alpha"] == 0.0


def test_constraint_after_many_adversarial_steps():
    p = params()
    opt = Adam(lr=0.05)
    for _ in range(200):
        g = zeros_like(p)
        g["layer0.log_alpha"] = np.array(5.0)
        opt.step(p, g)
        assert p["layer0.log_alpha"] <= 0.0


def test_averaging_closed_forms():
    opt = Adam(lr=1e-3, avg_decay=0.9)
    p = {"w": np.array([1.0])}
    opt.step(p, {"w": np.array([1.0])})
    p1 = p["w"].copy()
    np.testing.assert_allclose(opt.averaged_params()["w"], p1, rtol=1e-15)
    opt.step(p, {"w": np.array([1.0])})
    p2 = p["w"].copy()
    blend = (0.9 * 0.1 * p1 + 0.1 * p2) / (1 - 0.9 ** 2)
    np.testing.assert_allclose(opt.averaged_params()["w"], blend, rtol=1e-15)


def test_constant_iterates_average_to_constant():
    opt = Adam()
    p = {"w": np.array([3.0])}
    for _ in range(50):
        opt.step(p, {"w": np.array([0.0])})
    assert opt.averaged_params()["w"][0] == pytest.approx(3.0, rel=1e-12)


def test_errors_name_the_parameter():
    p = params()
    g = zeros_like(p)
    g["layer0.bias"] = np.array([math.nan])
    with pytest.raises(OptimizerError) as info:
        Adam().step(p, g)
    assert info.value.path == "layer0.bias"
    assert "layer0.bias" in str(info.value)
    with pytest.raises(OptimizerError):
        Adam().step(p, {"layer0.theta": np.zeros((1, 2))})
    g = zeros_like(p)
    g["layer0.theta"] = np.zeros(2)
    with pytest.raises(OptimizerError):
        Adam().step(p, g)
    with pytest.raises(OptimizerError):
        Adam().averaged_params()


def test_trajectories_are_deterministic():
    grads = np.random.default_rng(0).standard_normal((30, 3))
    runs = []
    for _ in range(2):
        p = {"w": np.zeros(3), "layer1.log_alpha": np.full(3, -1.0)}
        opt = Adam(lr=0.01)
        for g in grads:
            opt.step(p, {"w": g, "layer1.log_alpha": g})
        runs.append(p)
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k])
