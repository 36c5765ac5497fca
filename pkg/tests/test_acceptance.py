"""Acceptance suite: ten end-to-end criteria, one PASS/FAIL line each.

Run with pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""

import functools
import math
import os
import sys
import tempfile
import time

import numpy as np
import pytest

from varigrad import cli
from varigrad.config import RunConfig
from varigrad.diagnostics import (estimator_speed_bench, finite_difference_audit,
                                  variance_scaling_curve, variance_table)
from varigrad.kl import DropoutPosterior, Granularity, KlMode, neg_kl_per_unit, neg_kl_total
from varigrad.layers import DenseVariationalLayer, EstimatorMode, NoiseType
from varigrad.model import Mlp, error_rate
from varigrad.optim import Adam
from varigrad.tensor import RngStream

RESULTS = {}

ORDER = ["none", "local", "per-datapoint", "per-minibatch"]

# trained-for-2-epochs fixture shared by the variance criteria
VARIANCE_FIXTURE = dict(n_train=5000, n_val=1000, n_test=1000, dim=100, classes=10,
                        separation=2.0, hidden=(64, 64), input_noise="typeB",
                        hidden_noise="typeB", epochs=2, M=100, seed=0)

# overfit-prone fixture: few training points, wide net
OVERFIT_FIXTURE = dict(n_train=256, n_val=1000, n_test=10000, dim=50, classes=10,
                       separation=3.0, hidden=(128, 128, 128), granularity="input",
                       epochs=200, M=32)


class Verdict:
    def __init__(self, number, title, ok, detail, seconds, budget=None):
        self.number, self.title, self.detail, self.seconds = number, title, detail, seconds
        self.budget = budget
        self.ok = bool(ok) and (budget is None or seconds < budget)

    def line(self):
        timing = f"{self.seconds:.1f}s" + (f" (limit {self.budget:g}s)" if self.budget else "")
        return (f"criterion {self.number:>2} {'PASS' if self.ok else 'FAIL'}  {self.title}: "
                f"{self.detail} [{timing}]")


def criterion(number, title, budget=None):
    def wrap(fn):
        @functools.wraps(fn)
        def run():
            t0 = time.perf_counter()
            ok, detail = fn()
            v = Verdict(number, title, ok, detail, time.perf_counter() - t0, budget)
            RESULTS[number] = v
            return v
        return run
    return wrap


@functools.lru_cache(maxsize=None)
def variance_fixture():
    cfg = RunConfig().replace(**VARIANCE_FIXTURE)
    train, val, _ = cli.load_datasets(cfg)
    return cli._train(cfg, train, val).model, train


@criterion(1, "gradient correctness, 8-8-8-3 MLP, 4 modes x 2 noise types", budget=10)
def check_gradients():
    data = RngStream(101, 0)
    X = data.normal((16, 8))
    y = data.integers(3, 16)
    worst_all, where = 0.0, None
    for noise, gran in ((NoiseType.TYPE_B, Granularity.PER_WEIGHT),
                        (NoiseType.TYPE_A, Granularity.PER_INPUT_NEURON)):
        model = Mlp.build([8, 8, 8, 3], RngStream(102, 1), noise, granularity=gran)
        for layer in model.layers:
            la = layer.posterior.log_alpha
            la[...] = np.minimum(la, -0.1)   # keep h-perturbations inside alpha <= 1
        for mode in EstimatorMode:
            worst = finite_difference_audit(model, X, y, 1e-5, mode, seed=7)
            for key, err in worst.items():
                if err > worst_all:
                    worst_all, where = err, f"{noise.value}/{mode.value}/{key}"
    return worst_all < 1e-4, f"max relative error {worst_all:.2e} at {where} (< 1e-4)"


@criterion(2, "KL fidelity on 100-point grid over [1/19, 1]", budget=5)
def check_kl():
    la = np.linspace(math.log(1 / 19), 0.0, 100)
    quad = neg_kl_per_unit(la, KlMode.QUADRATURE)
    poly = neg_kl_per_unit(la, KlMode.POLYNOMIAL)
    bound = neg_kl_per_unit(la, KlMode.LOWER_BOUND)
    gap = float(np.max(np.abs(poly - quad)))
    at = float(np.exp(la[np.argmax(np.abs(poly - quad))]))
    zero = neg_kl_per_unit(0.0, KlMode.QUADRATURE)
    bound_ok = bool(np.all(bound <= quad))
    ok = gap < 2e-3 and zero == 0.0 and bound_ok
    return ok, (f"max |poly - quad| = {gap:.3e} at alpha={at:.4f} (< 2e-3); quad(1) = {zero}; "
                f"bound <= quad: {bound_ok}")


@criterion(3, "moment matching, local vs per-datapoint, 4x3x2 fixture", budget=30)
def check_moments():
    A = np.array([[1.0, 0.5, 2.0], [0.2, 1.5, 0.7], [2.0, 2.0, 0.1], [0.6, 0.3, 1.2]])
    theta = np.array([[0.8, 0.3], [0.4, 1.1], [0.5, 0.6]])
    post = DropoutPosterior(theta, np.log(0.5), Granularity.PER_LAYER)
    layer = DenseVariationalLayer(post, np.zeros(2), NoiseType.TYPE_B)
    draws = 200_000
    tiled = np.tile(A, (draws, 1))
    stats = {}
    for mode in (EstimatorMode.LOCAL, EstimatorMode.PER_DATAPOINT):
        out, _ = layer.forward(tiled, mode, RngStream(303, 1))
        out = out.reshape(draws, 4, 2)
        stats[mode] = (out.mean(axis=0), out.var(axis=0))
    (m_l, v_l), (m_d, v_d) = stats[EstimatorMode.LOCAL], stats[EstimatorMode.PER_DATAPOINT]
    mean_rel = float(np.max(np.abs(m_l - m_d) / np.abs(m_d)))
    var_rel = float(np.max(np.abs(v_l - v_d) / v_d))
    return (mean_rel < 0.01 and var_rel < 0.01,
            f"max relative gap: mean {mean_rel:.2e}, variance {var_rel:.2e} (< 1e-2)")


@criterion(4, "variance ordering none <= local <= per-datapoint <= per-minibatch", budget=300)
def check_ordering():
    model, train = variance_fixture()
    rep = variance_table(model, train, ORDER, 100, 200, seed=0)
    worst, parts = math.inf, []
    for layer in (0, len(model.layers) - 1):
        entries = [rep.get(layer, m) for m in ORDER]
        margins = [(b.mean_variance - a.mean_variance) / math.hypot(a.stderr, b.stderr)
                   for a, b in zip(entries, entries[1:])]
        worst = min(worst, *margins)
        parts.append(f"layer {layer}: " + " < ".join(f"{e.mean_variance:.4g}" for e in entries))
    return worst >= 2.0, "; ".join(parts) + f"; smallest margin {worst:.1f} SE (>= 2)"


@criterion(5, "1/M variance scaling", budget=300)
def check_scaling():
    model, train = variance_fixture()
    ratios = {}
    for mode in (EstimatorMode.LOCAL, EstimatorMode.PER_MINIBATCH):
        curve = dict(variance_scaling_curve(model, train, mode, [50, 100, 200], R=500, seed=0))
        ratios[mode] = [curve[m] / curve[2 * m] for m in (50, 100)]
    local, shared = ratios[EstimatorMode.LOCAL], ratios[EstimatorMode.PER_MINIBATCH]
    ok = all(1.6 <= r <= 2.4 for r in local) and all(s < r for s, r in zip(shared, local))
    return ok, (f"local ratios {local[0]:.3f}, {local[1]:.3f} in [1.6, 2.4]; per-minibatch "
                f"{shared[0]:.3f}, {shared[1]:.3f} (must be smaller)")


@criterion(6, "speed ordering local vs per-datapoint", budget=120)
def check_speed():
    gaps = []
    for K in (64, 256, 512):
        rep = estimator_speed_bench(K, K, 256, [EstimatorMode.LOCAL, EstimatorMode.PER_DATAPOINT],
                                    trials=3)
        gaps.append(rep.median_seconds["per-datapoint"] / rep.median_seconds["local"])
    ok = gaps[-1] >= 5.0 and all(b > a for a, b in zip(gaps, gaps[1:]))
    return ok, ("per-datapoint / local time at K=64,256,512: "
                + ", ".join(f"{g:.1f}x" for g in gaps) + " (>= 5x at 512, increasing)")


@criterion(7, "adaptive typeA test error <= no-noise, 3 seeds", budget=600)
def check_regularization():
    errors = {"typeA": [], "none": []}
    for seed in range(3):
        for noise in errors:
            cfg = RunConfig().replace(**OVERFIT_FIXTURE, input_noise=noise, hidden_noise=noise,
                                      seed=seed, data_seed=100 + seed)
            train, val, test = cli.load_datasets(cfg)
            errors[noise].append(error_rate(cli._train(cfg, train, val).model, test.X, test.y))
    a, b = float(np.mean(errors["typeA"])), float(np.mean(errors["none"]))
    return a <= b, f"mean test error typeA {a:.4f} vs none {b:.4f}"


@criterion(8, "KL independent of theta (bit-identical)")
def check_theta_independence():
    rng = RngStream(808, 0)
    cases = [(Granularity.PER_LAYER, False, ()), (Granularity.PER_INPUT_NEURON, False, (6,)),
             (Granularity.PER_WEIGHT, False, (6, 4)), (Granularity.PER_INPUT_NEURON, True, (6,))]
    checked = 0
    for gran, corr, shape in cases:
        la = -3.0 * rng.uniform(shape) if shape else np.array(-1.3)
        base = DropoutPosterior(rng.normal((6, 4)), la, gran, corr)
        for mode in KlMode:
            ref = neg_kl_total(base, mode)
            for _ in range(5):
                moved = DropoutPosterior(base.theta + 10 * rng.normal((6, 4)), la, gran, corr)
                got = neg_kl_total(moved, mode)
                if got[0] != ref[0] or (ref[1] is not None and not np.array_equal(got[1], ref[1])):
                    return False, f"value changed for {gran.value}/{mode.value}"
                checked += 1
    return True, f"{checked} perturbations, all values and gradients bit-identical"


@criterion(9, "alpha <= 1 after 1000 adversarial steps")
def check_constraint():
    model = Mlp.build([10, 12, 4], RngStream(909, 1), NoiseType.TYPE_B,
                      granularity=Granularity.PER_WEIGHT)
    params = model.parameters()
    opt = Adam(lr=0.01)
    noise = RngStream(909, 2)
    for _ in range(1000):
        grads = {k: noise.normal(np.shape(v)) for k, v in params.items()}
        for k in grads:
            if k.endswith("log_alpha"):
                grads[k] = 1.0 + np.abs(grads[k]) * 1e3
        opt.step(params, grads)
    max_alpha = max(float(np.max(np.exp(v))) for k, v in params.items() if k.endswith("log_alpha"))
    return max_alpha == 1.0, f"max alpha = {max_alpha!r}"


@criterion(10, "train and variance outputs byte-identical across runs")
def check_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        common = ["--n_train", "300", "--n_val", "100", "--n_test", "100", "--dim", "6",
                  "--classes", "3", "--hidden", "12,12", "--epochs", "2", "--M", "25",
                  "--seed", "42"]
        runs = [
            ["train", "--out", os.path.join(tmp, "train"), *common],
            ["variance", "--out", os.path.join(tmp, "variance"), *common,
             "--fresh_train", "true", "--R", "10"],
        ]
        snapshots = []
        for _ in range(2):
            snap = {}
            for argv in runs:
                code = cli.main(argv)
                if code != 0:
                    return False, f"{argv[0]} exited with {code}"
                out = argv[2]
                for name in sorted(os.listdir(out)):
                    with open(os.path.join(out, name), "rb") as f:
                        snap[f"{argv[0]}/{name}"] = f.read()
            snapshots.append(snap)
        same = snapshots[0] == snapshots[1]
        return same, f"{len(snapshots[0])} files compared: " + ", ".join(sorted(snapshots[0]))


CHECKS = [check_gradients, check_kl, check_moments, check_ordering, check_scaling, check_speed,
          check_regularization, check_theta_independence, check_constraint, check_determinism]


@pytest.mark.slow
@pytest.mark.parametrize("check", CHECKS, ids=lambda c: c.__name__.replace("check_", ""))
def test_acceptance(check):
    verdict = check()
    print(verdict.line())
    assert verdict.ok, verdict.line()


if __name__ == "__main__":
    failed = 0
    for check in CHECKS:
        v = check()
        print(v.line(), flush=True)
        failed += not v.ok
    sys.exit(1 if failed else 0)
