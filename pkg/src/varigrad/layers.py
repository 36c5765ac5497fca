"""Dense layers with interchangeable stochastic forward/backward passes.

A layer computes ``B = A W + bias`` for an input ``A`` (M x K) and a random
weight matrix ``W`` (K x L) whose distribution is set by the noise type.
The estimator mode decides how that randomness is realised:

* ``LOCAL``: noise drawn per datapoint on the activations (independent
  noise) or on the inputs (correlated noise); never samples W.
* ``PER_DATAPOINT``: an independent W for every row of A.
* ``PER_MINIBATCH``: one W shared by every row of A.
* ``NONE``: W = theta.

``backward`` returns exact gradients of the realised output, with the noise
held fixed, for ``theta``, ``log_alpha``, ``bias`` and ``A``.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, DomainError, ShapeError
from .kl import DropoutPosterior, Granularity


class NoiseType(enum.Enum):
    TYPE_B = "typeB"
    TYPE_A = "typeA"
    BINARY = "binary"
    GAUSSIAN_FIXED = "gaussian-fixed"
    NONE = "none"


class EstimatorMode(enum.Enum):
    LOCAL = "local"
    PER_DATAPOINT = "per-datapoint"
    PER_MINIBATCH = "per-minibatch"
    NONE = "none"


_WEIGHT_SAMPLING = (EstimatorMode.PER_DATAPOINT, EstimatorMode.PER_MINIBATCH)


@dataclass
class ForwardCache:
    mode: EstimatorMode
    A: np.ndarray
    z: np.ndarray = None        # standard normals behind the realised noise
    scale: np.ndarray = None    # input multipliers (A * scale) for input-noise paths
    gamma: np.ndarray = None
    delta: np.ndarray = None
    W: np.ndarray = None
    stream: tuple = None        # (seed, stream_id, counter, blocks_per_row)


@dataclass
class DenseVariationalLayer:
    posterior: DropoutPosterior
    bias: np.ndarray
    noise: NoiseType = NoiseType.TYPE_B
    dropout_p: float = 0.0

    def __post_init__(self):
        self.noise = NoiseType(self.noise)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.n_out,):
            raise ShapeError(f"bias must have length {self.n_out}, got {self.bias.shape}")
        if self.noise is NoiseType.BINARY and not 0.0 <= self.dropout_p < 1.0:
            raise DomainError(f"binary dropout rate must lie in [0, 1), got {self.dropout_p}")
        if self.noise in (NoiseType.TYPE_A, NoiseType.GAUSSIAN_FIXED) and not self.posterior.correlated:
            raise ConfigurationError(f"{self.noise.value} noise needs a correlated posterior")
        if self.noise is NoiseType.TYPE_B and self.posterior.correlated:
            raise ConfigurationError("typeB noise needs an independent-weight posterior")
        if self.noise is NoiseType.GAUSSIAN_FIXED and np.any(self.posterior.log_alpha > 0):
            raise DomainError("fixed Gaussian dropout alpha must lie in (0, 1]")

    @classmethod
    def init(cls, n_in, n_out, noise=NoiseType.TYPE_B, alpha0=1.0, rng=None,
             granularity=Granularity.PER_LAYER, dropout_p=0.0):
        """Uniform(-1/sqrt(K), 1/sqrt(K)) means, zero bias, log_alpha = log(alpha0)."""
        noise = NoiseType(noise)
        if rng is None:
            raise ValueError("init needs an RngStream")
        bound = 1.0 / math.sqrt(n_in)
        theta = (2.0 * rng.uniform((n_in, n_out)) - 1.0) * bound
        correlated = noise in (NoiseType.TYPE_A, NoiseType.GAUSSIAN_FIXED, NoiseType.BINARY)
        if noise is NoiseType.BINARY:
            # informational only: binary noise carries no variational alpha
            alpha0 = max(matched_alpha(dropout_p), 1e-12)
        if correlated and granularity is Granularity.PER_WEIGHT:
            raise ConfigurationError(f"{noise.value} noise cannot use per-weight alpha",
                                     field="granularity")
        shape = {Granularity.PER_LAYER: (),
                 Granularity.PER_INPUT_NEURON: (n_in,),
                 Granularity.PER_WEIGHT: (n_in, n_out)}[Granularity(granularity)]
        log_alpha = np.full(shape, math.log(alpha0))
        post = DropoutPosterior(theta, log_alpha, Granularity(granularity), correlated)
        return cls(post, np.zeros(n_out), noise, dropout_p)

    @property
    def theta(self):
        return self.posterior.theta

    @property
    def n_in(self):
        return self.posterior.theta.shape[0]

    @property
    def n_out(self):
        return self.posterior.theta.shape[1]

    @property
    def adaptive(self):
        """Whether log_alpha is a variational parameter (carries KL and gradients)."""
        return self.noise in (NoiseType.TYPE_A, NoiseType.TYPE_B)

    def parameters(self):
        params = {"theta": self.posterior.theta, "bias": self.bias}
        if self.adaptive:
            params["log_alpha"] = self.posterior.log_alpha
        return params

    def _check_mode(self, mode):
        mode = EstimatorMode(mode)
        if mode in _WEIGHT_SAMPLING and self.noise in (NoiseType.BINARY, NoiseType.GAUSSIAN_FIXED):
            raise ConfigurationError(f"{mode.value} mode samples weights; it needs typeA or typeB "
                                     f"noise, not {self.noise.value}", field="mode")
        return mode

    # forward

    def forward(self, A, mode, rng):
        A = np.ascontiguousarray(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[1] != self.n_in:
            raise ShapeError(f"layer expects M x {self.n_in} input, got {A.shape}")
        mode = self._check_mode(mode)
        theta = self.posterior.theta
        if mode is EstimatorMode.NONE or self.noise is NoiseType.NONE:
            return A @ theta + self.bias, ForwardCache(EstimatorMode.NONE, A)

        M = A.shape[0]
        if self.noise is NoiseType.TYPE_B:
            if mode is EstimatorMode.LOCAL:
                var_w = self.posterior.alpha * theta * theta
                gamma = A @ theta
                delta = (A * A) @ var_w
                z = rng.normal((M, self.n_out))
                B = gamma + np.sqrt(delta) * z
                return B + self.bias, ForwardCache(mode, A, z=z, gamma=gamma, delta=delta)
            sqrt_alpha = np.ascontiguousarray(np.sqrt(self.posterior.alpha))
            if mode is EstimatorMode.PER_MINIBATCH:
                z = rng.normal(theta.shape)
                W = theta * (1.0 + sqrt_alpha * z)
                return A @ W + self.bias, ForwardCache(mode, A, z=z, W=W)
            bpr = (self.n_in * self.n_out + 1) // 2
            start = rng.reserve(M * bpr)
            stream = (rng.seed, rng.stream_id, start, bpr)
            B = kernels.datapoint_forward(A, theta, sqrt_alpha, *stream)
            return B + self.bias, ForwardCache(mode, A, stream=stream)

        # input-noise paths: B = (A * scale) theta
        if self.noise is NoiseType.BINARY:
            p = self.dropout_p
            z = None
            scale = rng.bernoulli(1.0 - p, A.shape) / (1.0 - p)
        else:
            sqrt_alpha = np.sqrt(self.posterior.alpha)
            if mode is EstimatorMode.PER_MINIBATCH:
                z = rng.normal(self.n_in)
            elif mode is EstimatorMode.PER_DATAPOINT:
                # row m uses blocks [start + m*bpr, start + (m+1)*bpr)
                bpr = (self.n_in + 1) // 2
                z = rng.normal((M, 2 * bpr))[:, :self.n_in]
            else:
                z = rng.normal(A.shape)
            scale = 1.0 + sqrt_alpha * z
        As = A * scale
        return As @ theta + self.bias, ForwardCache(mode, A, z=z, scale=scale)

    # backward

    def backward(self, cache, dB):
        dB = np.ascontiguousarray(dB, dtype=np.float64)
        A = cache.A
        if dB.shape != (A.shape[0], self.n_out):
            raise ShapeError(f"upstream gradient shape {dB.shape} != {(A.shape[0], self.n_out)}")
        theta = self.posterior.theta
        grads = {"bias": dB.sum(axis=0)}
        d_la_units = None
        mode = cache.mode

        if mode is EstimatorMode.NONE:
            grads["theta"] = A.T @ dB
            grads["A"] = dB @ theta.T
        elif self.noise is NoiseType.TYPE_B:
            if mode is EstimatorMode.LOCAL:
                if cache.delta is None:
                    raise ConfigurationError("cache was not produced by a local-mode forward pass")
                alpha = self.posterior.alpha
                var_w = alpha * theta * theta
                root = np.sqrt(cache.delta)
                # delta = 0 means a deterministic activation: no noise gradient there
                safe = np.where(root > 0.0, root, 1.0)
                d_delta = np.where(root > 0.0, dB * cache.z / (2.0 * safe), 0.0)
                d_var = (A * A).T @ d_delta
                grads["theta"] = A.T @ dB + d_var * 2.0 * alpha * theta
                grads["A"] = dB @ theta.T + 2.0 * A * (d_delta @ var_w.T)
                d_la_units = d_var * var_w
            elif mode is EstimatorMode.PER_MINIBATCH:
                sqrt_alpha = np.sqrt(self.posterior.alpha)
                dW = A.T @ dB
                grads["theta"] = dW * (1.0 + sqrt_alpha * cache.z)
                grads["A"] = dB @ cache.W.T
                d_la_units = 0.5 * dW * theta * sqrt_alpha * cache.z
            else:
                if cache.stream is None:
                    raise ConfigurationError("cache was not produced by a per-datapoint forward pass")
                sqrt_alpha = np.ascontiguousarray(np.sqrt(self.posterior.alpha))
                d_theta, d_la_units, d_A = kernels.datapoint_backward(
                    A, theta, sqrt_alpha, dB, *cache.stream)
                grads["theta"] = d_theta
                grads["A"] = d_A
        else:
            scale = cache.scale
            As = A * scale
            grads["theta"] = As.T @ dB
            d_As = dB @ theta.T
            grads["A"] = d_As * scale
            if self.noise is NoiseType.TYPE_A:
                sqrt_alpha = np.sqrt(self.posterior.alpha)
                d_scale = d_As * A
                if cache.z.ndim == 1:
                    d_scale = d_scale.sum(axis=0)
                    d_la_units = 0.5 * d_scale * sqrt_alpha * cache.z
                else:
                    d_la_units = 0.5 * (d_scale * cache.z).sum(axis=0) * sqrt_alpha

        if self.adaptive:
            if d_la_units is None:
                grads["log_alpha"] = np.zeros_like(self.posterior.log_alpha)
            else:
                grads["log_alpha"] = self.posterior.reduce(d_la_units)
        return grads


def forward_binary_dropout(A, p, rng):
    """Inverted binary dropout: returns (A * mask / (1 - p), mask)."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {p}")
    A = np.asarray(A, dtype=np.float64)
    mask = rng.bernoulli(1.0 - p, A.shape)
    return A * mask / (1.0 - p), mask


def matched_alpha(p):
    """Gaussian noise variance with the same mean and variance as rate-p dropout."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {p}")
    return p / (1.0 - p)
