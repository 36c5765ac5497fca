"""Minibatch training with Adam ascent, temporal averaging and early stopping."""

import csv
import io
import math
from dataclasses import dataclass, field

from .data import MinibatchSampler
from .errors import OptimizerError
from .kl import KlMode
from .layers import EstimatorMode
from .model import elbo_minibatch, error_rate
from .optim import Adam
from .tensor import RngStream

METRIC_COLUMNS = ("epoch", "train_elbo", "train_error", "val_error", "mean_alpha_per_layer")

# stream ids derived from the run seed
SAMPLER_STREAM = 11
NOISE_STREAM = 12


@dataclass
class EpochMetrics:
    epoch: int
    train_elbo: float
    train_error: float
    val_error: float
    mean_alpha: list

    def row(self):
        alphas = ";".join(f"{a:.10g}" for a in self.mean_alpha)
        return [self.epoch, f"{self.train_elbo:.10g}", f"{self.train_error:.6f}",
                f"{self.val_error:.6f}", alphas]


@dataclass
class FitResult:
    model: object            # best averaged parameters by validation error
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_error: float = math.inf
    steps: int = 0

    def metrics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in self.history:
            w.writerow(m.row())
        return buf.getvalue()


def averaged_model(model, optimizer):
    avg = model.copy()
    avg.set_parameters(optimizer.averaged_params())
    return avg


def fit(model, train, val, epochs, M=100, mode=EstimatorMode.LOCAL, kl_mode=KlMode.POLYNOMIAL,
        kl_scale=1.0, seed=0, optimizer=None, patience=None, with_replacement=True):
    """Maximise the minibatch ELBO of ``model`` on ``train``.

    One epoch is ``ceil(N / M)`` steps. After every epoch the temporally
    averaged parameters are scored on ``val``; the best of those (lowest
    validation error, earliest on ties) is returned. Training stops early
    once ``patience`` epochs pass without improvement. ``model`` holds the
    raw final iterate afterwards.
    """
    optimizer = optimizer or Adam()
    mode = EstimatorMode(mode)
    kl_mode = KlMode(kl_mode)
    sampler = MinibatchSampler(train.N, M, RngStream(seed, SAMPLER_STREAM), with_replacement)
    noise = RngStream(seed, NOISE_STREAM)
    steps_per_epoch = math.ceil(train.N / M)
    params = model.parameters()

    result = FitResult(model=model.copy())
    since_best = 0
    for epoch in range(1, epochs + 1):
        elbo_sum = 0.0
        for _ in range(steps_per_epoch):
            idx = sampler.next_indices()
            report, grads = elbo_minibatch(model, train.X[idx], train.y[idx], train.N, mode,
                                           noise, kl_mode, kl_scale)
            if not math.isfinite(report.elbo):
                raise OptimizerError(f"non-finite ELBO at step {optimizer.t + 1}")
            optimizer.step(params, grads)
            elbo_sum += report.elbo
        result.steps = optimizer.t

        evaluated = averaged_model(model, optimizer)
        val_err = error_rate(evaluated, val.X, val.y)
        metrics = EpochMetrics(epoch, elbo_sum / steps_per_epoch,
                               error_rate(evaluated, train.X, train.y), val_err,
                               evaluated.mean_alpha())
        result.history.append(metrics)
        if val_err < result.best_val_error:
            result.best_val_error = val_err
            result.best_epoch = epoch
            result.model = evaluated
            since_best = 0
        else:
            since_best += 1
            if patience is not None and since_best >= patience:
                break
    return result

