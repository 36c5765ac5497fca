"""Gradient-variance measurements, finite-difference audits and speed benchmarks."""

import csv
import io
import json
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .data import MinibatchSampler
from .errors import ConfigurationError, DomainError, StatisticsError
from .kl import KlMode
from .layers import DenseVariationalLayer, EstimatorMode, NoiseType
from .model import elbo_minibatch
from .tensor import RngStream

# stream ids; noise for draw r uses NOISE_STREAM + r
BATCH_STREAM = 1
NOISE_STREAM = 1 << 32

VARIANCE_COLUMNS = ("layer", "mode", "M", "R", "mean_variance", "stderr")


@dataclass
class VarianceEntry:
    layer: int
    mode: str
    M: int
    R: int
    mean_variance: float
    stderr: float


@dataclass
class VarianceReport:
    entries: list = field(default_factory=list)
    epoch_tag: str = ""
    with_replacement: bool = True
    seed: int = 0

    def get(self, layer, mode):
        mode = EstimatorMode(mode).value
        for e in self.entries:
            if e.layer == layer and e.mode == mode:
                return e
        raise KeyError((layer, mode))

    def extend(self, other):
        self.entries.extend(other.entries)
        return self

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(VARIANCE_COLUMNS)
        for e in self.entries:
            w.writerow([e.layer, e.mode, e.M, e.R, repr(e.mean_variance), repr(e.stderr)])
        return buf.getvalue()


def _variance_stats(G):
    """Mean over columns of the per-column sample variance, with a standard error.

    Deviations are taken from the first draw before averaging, which keeps
    the result exactly 0 when every draw is identical. The standard error
    treats the per-draw mean squared deviation as the i.i.d. unit.
    """
    R = G.shape[0]
    D = G - G[0]
    D = D - D.mean(axis=0)
    per_draw = np.mean(D * D, axis=1)
    mean_var = float(per_draw.sum() / (R - 1))
    stderr = float(np.std(per_draw, ddof=1) * np.sqrt(R) / (R - 1))
    return mean_var, stderr


def gradient_variance(model, dataset, mode, M, R=200, layers=None, with_replacement=True,
                      seed=0, kl_mode=KlMode.POLYNOMIAL, kl_scale=1.0, epoch_tag=""):
    """Empirical variance of the minibatch ELBO gradient w.r.t. layer means.

    Draws ``R`` minibatches (fresh noise for each), takes the gradient with
    respect to ``theta`` of each selected layer, and reports the average
    over that layer's entries of the per-entry variance across draws.
    Layers default to the first and last. Minibatch rows are sorted, so
    repeated identical batches give bit-identical gradients.
    """
    if R < 2:
        raise StatisticsError("need at least R = 2 draws to estimate a variance")
    if M > dataset.N and not with_replacement:
        raise ConfigurationError(f"M={M} exceeds dataset size {dataset.N}", field="M")
    mode = EstimatorMode(mode)
    n_layers = len(model.layers)
    if layers is None:
        layers = sorted({0, n_layers - 1})
    keys = [f"layer{i}.theta" for i in layers]

    sampler = MinibatchSampler(dataset.N, M, RngStream(seed, BATCH_STREAM), with_replacement)
    draws = {k: [] for k in keys}
    for r in range(R):
        idx = np.sort(sampler.next_indices())
        noise = RngStream(seed, NOISE_STREAM + r)
        _, grads = elbo_minibatch(model, dataset.X[idx], dataset.y[idx], dataset.N, mode, noise,
                                  kl_mode, kl_scale)
        for k in keys:
            draws[k].append(grads[k].ravel())

    report = VarianceReport(epoch_tag=epoch_tag, with_replacement=with_replacement, seed=seed)
    for i, k in zip(layers, keys):
        mean_var, se = _variance_stats(np.array(draws[k]))
        report.entries.append(VarianceEntry(i, mode.value, M, R, mean_var, se))
    return report


def variance_table(model, dataset, modes, M, R=200, **kwargs):
    report = None
    for mode in modes:
        r = gradient_variance(model, dataset, mode, M, R, **kwargs)
        report = r if report is None else report.extend(r)
    return report


def variance_scaling_curve(model, dataset, mode, M_list, R=200, layer=None, **kwargs):
    """``[(M, mean variance), ...]`` for one layer (default: the last)."""
    if layer is None:
        layer = len(model.layers) - 1
    out = []
    for M in M_list:
        rep = gradient_variance(model, dataset, mode, M, R, layers=[layer], **kwargs)
        out.append((M, rep.entries[0].mean_variance))
    return out


def finite_difference_audit(model, X, y, h=1e-5, mode=EstimatorMode.LOCAL, seed=0, N=None,
                            kl_mode=KlMode.POLYNOMIAL, kl_scale=1.0, floor=1e-5):
    """Worst relative error between analytic and central-difference gradients.

    The noise is frozen by re-seeding the same stream for every evaluation,
    so the ELBO estimate is a deterministic function of the parameters.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    entries that are zero up to roundoff from dominating. Returns
    ``{parameter key: max relative error}``.
    """
    if not h > 0:
        raise DomainError(f"finite-difference step must be positive, got {h}")
    N = len(X) if N is None else N
    mode = EstimatorMode(mode)

    def objective():
        rep, _ = elbo_minibatch(model, X, y, N, mode, RngStream(seed, NOISE_STREAM), kl_mode,
                                kl_scale, compute_grads=False)
        return rep.elbo

    _, analytic = elbo_minibatch(model, X, y, N, mode, RngStream(seed, NOISE_STREAM), kl_mode,
                                 kl_scale)
    worst = {}
    for key, p in model.parameters().items():
        flat = p.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = objective()
            flat[i] = orig - h
            down = objective()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        a = np.asarray(analytic[key]).reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        worst[key] = float(np.max(np.abs(a - numeric) / denom))
    return worst


@dataclass
class SpeedReport:
    K: int
    L: int
    M: int
    trials: int
    median_seconds: dict
    seconds_per_epoch: dict
    epoch_size: int
    backend: str
    hardware: str

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _hardware_note():
    return f"{platform.machine()} {platform.processor() or 'cpu'} python{platform.python_version()}"


def estimator_speed_bench(K, L, M, modes=tuple(EstimatorMode), trials=5, seed=0,
                          epoch_size=60000, noise=NoiseType.TYPE_B):
    """Median wall-clock seconds of one layer forward+backward per estimator mode."""
    if trials < 3:
        raise DomainError("need at least 3 timing trials")
    init = RngStream(seed, 7)
    layer = DenseVariationalLayer.init(K, L, noise, 0.5, init)
    A = init.normal((M, K))
    dB = init.normal((M, L))
    medians = {}
    for mode in modes:
        mode = EstimatorMode(mode)
        rng = RngStream(seed, NOISE_STREAM)
        out, cache = layer.forward(A, mode, rng)  # warm-up
        layer.backward(cache, dB)
        times = []
        for _ in range(trials):
            t0 = time.perf_counter()
            out, cache = layer.forward(A, mode, rng)
            layer.backward(cache, dB)
            times.append(time.perf_counter() - t0)
        medians[mode.value] = statistics.median(times)
    per_epoch = {k: v * epoch_size / M for k, v in medians.items()}
    return SpeedReport(K, L, M, trials, medians, per_epoch, epoch_size, kernels.BACKEND,
                       _hardware_note())
