"""Dropout posteriors and their negative KL divergence to the log-uniform prior.

For a multiplicative posterior ``w = theta * eps`` with ``eps ~ N(1, alpha)``
the negative KL is, up to the improper prior's constant,

    0.5 * log(alpha) - E[log|eps|]

and does not involve ``theta``. The constant is fixed so that the exact
(quadrature) value is 0 at ``alpha = 1``. Three evaluation modes:

* ``QUADRATURE``: E[log|eps|] by adaptive Gauss-Legendre (oracle, no gradient)
* ``POLYNOMIAL``: cubic approximation in alpha
* ``LOWER_BOUND``: drops the nonnegative ``-E[log|eps|]`` term
"""

import enum
import functools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ConstraintError, DomainError, ShapeError

C1 = 1.16145124
C2 = -1.50204118
C3 = 0.58629921

# polynomial mode is pinned to 0 at alpha = 1, the same point that normalises
# the exact value
POLY_CONSTANT = -(C1 + C2 + C3)


class KlMode(enum.Enum):
    POLYNOMIAL = "poly"
    LOWER_BOUND = "bound"
    QUADRATURE = "quad"


class Granularity(enum.Enum):
    PER_LAYER = "layer"
    PER_INPUT_NEURON = "input"
    PER_WEIGHT = "weight"


@dataclass
class DropoutPosterior:
    """Mean parameters ``theta`` (K x L) with multiplicative Gaussian noise.

    ``correlated=False`` is independent weight noise, one noise unit per
    weight: q(w_ij) = N(theta_ij, alpha_ij theta_ij^2). ``correlated=True``
    is a shared scale per input row, one unit per input neuron:
    w_i = s_i theta_i with q(s_i) = N(1, alpha_i).
    """

    theta: np.ndarray
    log_alpha: np.ndarray
    granularity: Granularity = Granularity.PER_LAYER
    correlated: bool = False

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        self.log_alpha = np.array(self.log_alpha, dtype=np.float64)
        if self.theta.ndim != 2:
            raise ShapeError(f"theta must be K x L, got {self.theta.shape}")
        expected = {
            Granularity.PER_LAYER: (),
            Granularity.PER_INPUT_NEURON: (self.theta.shape[0],),
            Granularity.PER_WEIGHT: self.theta.shape,
        }[self.granularity]
        if self.correlated and self.granularity is Granularity.PER_WEIGHT:
            raise ConfigurationError("correlated weight noise has one scale per input neuron; "
                                     "per-weight granularity is undefined", field="granularity")
        if self.log_alpha.shape != expected:
            raise ShapeError(f"log_alpha shape {self.log_alpha.shape} does not match "
                             f"{self.granularity.value} granularity {expected}")

    @property
    def unit_shape(self):
        K, L = self.theta.shape
        return (K,) if self.correlated else (K, L)

    def expand(self, values):
        """Broadcast a log_alpha-shaped array to one entry per noise unit."""
        values = np.asarray(values, dtype=np.float64)
        if self.granularity is Granularity.PER_INPUT_NEURON and not self.correlated:
            values = values[:, None]
        return np.broadcast_to(values, self.unit_shape)

    def reduce(self, per_unit):
        """Sum a per-unit array back down to the shape of log_alpha."""
        per_unit = np.asarray(per_unit, dtype=np.float64)
        if self.granularity is Granularity.PER_LAYER:
            return np.array(per_unit.sum())
        if self.granularity is Granularity.PER_INPUT_NEURON and not self.correlated:
            return per_unit.sum(axis=1)
        return per_unit

    @property
    def alpha(self):
        return np.exp(self.expand(self.log_alpha))


def _gauss_legendre(order):
    return np.polynomial.legendre.leggauss(order)


@functools.lru_cache(maxsize=8)
def _nodes(order):
    return _gauss_legendre(order)


def _integrate(f, a, b, tol, order, max_depth=50):
    """Adaptive Gauss-Legendre on [a, b]: accept a panel when one panel and
    its two halves agree to within the panel's share of ``tol``."""
    x, w = _nodes(order)

    def panel(lo, hi):
        half = 0.5 * (hi - lo)
        return half * np.dot(w, f(lo + half * (x + 1.0)))

    total = 0.0
    width = b - a
    stack = [(a, b, panel(a, b), 0)]
    while stack:
        lo, hi, whole, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = panel(lo, mid), panel(mid, hi)
        if abs(left + right - whole) <= tol * (hi - lo) / width or depth >= max_depth:
            total += left + right
        else:
            stack.append((lo, mid, left, depth + 1))
            stack.append((mid, hi, right, depth + 1))
    return total


def expect_log_abs_eps(alpha, tol=1e-11, order=20):
    """E[log|eps|] for eps ~ N(1, alpha), by deterministic quadrature.

    Integrates over 1 +- 12 sqrt(alpha), split at the log singularity at 0
    when it lies inside the range.
    """
    alpha = float(alpha)
    if not math.isfinite(alpha) or alpha <= 0:
        raise DomainError(f"alpha must be positive and finite, got {alpha}")
    s = math.sqrt(alpha)
    norm = 1.0 / math.sqrt(2.0 * math.pi * alpha)

    def f(e):
        return np.log(np.abs(e)) * norm * np.exp(-0.5 * (e - 1.0) ** 2 / alpha)

    lo, hi = 1.0 - 12.0 * s, 1.0 + 12.0 * s
    if lo < 0.0:
        share = tol / 2
        return _integrate(f, lo, 0.0, share, order) + _integrate(f, 0.0, hi, share, order)
    return _integrate(f, lo, hi, tol, order)


@functools.lru_cache(maxsize=None)
def _exact_unnormalized(alpha):
    return 0.5 * math.log(alpha) - expect_log_abs_eps(alpha)


@functools.lru_cache(maxsize=None)
def exact_constant():
    """E[log|eps|] at alpha = 1, the offset that zeroes the exact value there."""
    return expect_log_abs_eps(1.0)


def _check_log_alpha(log_alpha):
    la = np.asarray(log_alpha, dtype=np.float64)
    if not np.all(np.isfinite(la)):
        raise DomainError("log_alpha must be finite")
    if np.any(la > 0.0):
        raise ConstraintError(f"log_alpha must be <= 0 (alpha <= 1), max is {la.max()}")
    return la


def _poly(la):
    a = np.exp(la)
    return POLY_CONSTANT + 0.5 * la + a * (C1 + a * (C2 + a * C3))


def _poly_grad(la):
    # derivative w.r.t. log_alpha
    a = np.exp(la)
    return 0.5 + a * (C1 + a * (2.0 * C2 + a * 3.0 * C3))


def _per_unit(la, mode):
    if mode is KlMode.POLYNOMIAL:
        return _poly(la)
    if mode is KlMode.LOWER_BOUND:
        return exact_constant() + 0.5 * la
    if mode is KlMode.QUADRATURE:
        flat = la.ravel()
        uniq, inv = np.unique(flat, return_inverse=True)
        vals = np.array([_exact_unnormalized(math.exp(v)) for v in uniq]) + exact_constant()
        return vals[inv].reshape(la.shape)
    raise ValueError(f"unknown KL mode {mode!r}")


def neg_kl_per_unit(log_alpha, mode=KlMode.POLYNOMIAL):
    """Negative KL of one noise unit; scalar in, float out (arrays map elementwise)."""
    la = _check_log_alpha(log_alpha)
    out = _per_unit(la, KlMode(mode))
    return float(out) if out.ndim == 0 else out


def neg_kl_per_unit_grad(log_alpha, mode=KlMode.POLYNOMIAL):
    la = _check_log_alpha(log_alpha)
    mode = KlMode(mode)
    if mode is KlMode.POLYNOMIAL:
        return _poly_grad(la)
    if mode is KlMode.LOWER_BOUND:
        return np.full_like(la, 0.5)
    raise ConfigurationError("quadrature KL is an evaluation oracle and has no gradient",
                             field="kl")


def neg_kl_total(posterior, mode=KlMode.POLYNOMIAL, kl_scale=1.0):
    """Scaled negative KL summed over the posterior's noise units.

    Returns ``(value, grad)`` where ``grad`` has the shape of
    ``posterior.log_alpha``; ``grad`` is None in quadrature mode.
    """
    if not kl_scale > 0:
        raise DomainError(f"kl_scale must be positive, got {kl_scale}")
    mode = KlMode(mode)
    la = _check_log_alpha(posterior.log_alpha)
    units = posterior.expand(la)
    value = kl_scale * float(np.sum(_per_unit(units, mode)))
    if mode is KlMode.QUADRATURE:
        return value, None
    grad = kl_scale * posterior.reduce(neg_kl_per_unit_grad(units, mode))
    return value, grad
