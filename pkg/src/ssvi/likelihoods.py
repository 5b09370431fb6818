"""Observation models and their Gaussian expectations.

Each likelihood provides

* ``log_density(y, f)``: log p(y | f)
* ``variational_expectation(y, m, v)``: E_N(f|m,v)[log p(y|f)] and its
  derivatives in m and v
* ``log_partition(y, m, v)``: log E_N(f|m,v)[p(y|f)] and its derivatives

Non-Gaussian expectations use Gauss-Hermite quadrature. Derivatives are the
exact derivatives of the quadrature sum, i.e. the rule applied to the
differentiated integrand after the change of variables f = m + sqrt(2v) x:

    d/dm E[g(f)] = E[g'(f)],     d/dv E[g(f)] = E[g'(f) x] / sqrt(2v)

The scalar kernels are numba-compiled so the forward filter can call them
per step during site initialisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import ClassVar, NamedTuple

import numpy as np
from numba import njit

from .errors import DataError, QuadratureError

GAUSSIAN, POISSON, BERNOULLI = 0, 1, 2
DEFAULT_QUAD_ORDER = 20

_LOG_2PI = math.log(2.0 * math.pi)
_SQRT_PI = math.sqrt(math.pi)


class QuadratureRule(NamedTuple):
    """Physicists' Gauss-Hermite rule: int e^{-x^2} g(x) dx ~ sum w_k g(x_k)."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray


@lru_cache(maxsize=None)
def gh_rule(order=DEFAULT_QUAD_ORDER):
    if not (isinstance(order, (int, np.integer)) and 1 <= order <= 100):
        raise ValueError(f"quadrature order must be an integer in [1, 100], got {order!r}")
    x, w = np.polynomial.hermite.hermgauss(int(order))
    # enforce exact symmetry of the nodes
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    x.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(int(order), x, w)


class VariationalExpectation(NamedTuple):
    value: np.ndarray
    d_m: np.ndarray
    d_v: np.ndarray


# --- scalar numba core --------------------------------------------------------


@njit(cache=True)
def _log_ndtr(x):
    if x > 5.0:
        return math.log1p(-0.5 * math.erfc(x / math.sqrt(2.0)))
    if x > -30.0:
        return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))
    x2 = x * x
    series = 1.0 - 1.0 / x2 + 3.0 / x2 ** 2 - 15.0 / x2 ** 3 + 105.0 / x2 ** 4
    return -0.5 * x2 - math.log(-x) - 0.5 * math.log(2.0 * math.pi) + math.log(series)


@njit(cache=True)
def _inv_mills(x):
    # phi(x) / Phi(x), stable for very negative x
    return math.exp(-0.5 * x * x - 0.5 * math.log(2.0 * math.pi) - _log_ndtr(x))


@njit(cache=True)
def _logp(kind, param, y, f):
    if kind == POISSON:
        return y * (f + math.log(param)) - param * math.exp(f) - math.lgamma(y + 1.0)
    if kind == BERNOULLI:
        return _log_ndtr(f if y > 0.5 else -f)
    r = y - f
    return -0.5 * (math.log(2.0 * math.pi * param) + r * r / param)


@njit(cache=True)
def _dlogp(kind, param, y, f):
    if kind == POISSON:
        return y - param * math.exp(f)
    if kind == BERNOULLI:
        s = 1.0 if y > 0.5 else -1.0
        return s * _inv_mills(s * f)
    return (y - f) / param


@njit(cache=True)
def _varexp(kind, param, y, m, v, nodes, weights):
    """(E[log p], dE/dm, dE/dv) under N(m, v)."""
    if kind == GAUSSIAN:
        r = y - m
        return (-0.5 * (math.log(2.0 * math.pi * param) + (r * r + v) / param), r / param, -0.5 / param)
    sv = math.sqrt(2.0 * v)
    val = 0.0
    dm = 0.0
    dx = 0.0
    for k in range(nodes.shape[0]):
        f = m + sv * nodes[k]
        wk = weights[k] / math.sqrt(math.pi)
        g1 = _dlogp(kind, param, y, f)
        val += wk * _logp(kind, param, y, f)
        dm += wk * g1
        dx += wk * g1 * nodes[k]
    return val, dm, dx / sv


@njit(cache=True)
def _logpart(kind, param, y, m, v, nodes, weights):
    """(log E[p], d/dm, d/dv) under N(m, v), log-sum-exp over nodes."""
    if kind == GAUSSIAN:
        s = v + param
        r = y - m
        return (-0.5 * (math.log(2.0 * math.pi * s) + r * r / s), r / s, 0.5 * (r * r / s - 1.0) / s)
    sv = math.sqrt(2.0 * v)
    n = nodes.shape[0]
    terms = np.empty(n)
    top = -np.inf
    for k in range(n):
        terms[k] = math.log(weights[k] / math.sqrt(math.pi)) + _logp(kind, param, y, m + sv * nodes[k])
        if terms[k] > top:
            top = terms[k]
    total = 0.0
    dm = 0.0
    dx = 0.0
    for k in range(n):
        p = math.exp(terms[k] - top)
        g1 = _dlogp(kind, param, y, m + sv * nodes[k])
        total += p
        dm += p * g1
        dx += p * g1 * nodes[k]
    return top + math.log(total), dm / total, dx / (total * sv)


@njit(cache=True)
def _varexp_vec(kind, param, y, m, v, nodes, weights, out):
    for i in range(y.shape[0]):
        a, b, c = _varexp(kind, param, y[i], m[i], v[i], nodes, weights)
        out[0, i] = a
        out[1, i] = b
        out[2, i] = c
        if not (math.isfinite(a) and math.isfinite(b) and math.isfinite(c)):
            return i
    return -1


@njit(cache=True)
def _logpart_vec(kind, param, y, m, v, nodes, weights, out):
    for i in range(y.shape[0]):
        a, b, c = _logpart(kind, param, y[i], m[i], v[i], nodes, weights)
        out[0, i] = a
        out[1, i] = b
        out[2, i] = c
        if not (math.isfinite(a) and math.isfinite(b) and math.isfinite(c)):
            return i
    return -1


@njit(cache=True)
def _logp_vec(kind, param, y, f, out):
    for i in range(y.shape[0]):
        out[i] = _logp(kind, param, y[i], f[i])


# --- public classes -------------------------------------------------------------


def _broadcast(*arrays):
    return [np.ascontiguousarray(a, dtype=float) for a in np.broadcast_arrays(*[np.atleast_1d(np.asarray(x, dtype=float)) for x in arrays])]


class Likelihood:
    kind: ClassVar[int]
    name: ClassVar[str]

    @property
    def param(self):
        raise NotImplementedError

    def check_support(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DataError(f"non-finite observation at index {int(np.flatnonzero(~np.isfinite(y))[0])}")
        return y

    def log_density(self, y, f):
        y = self.check_support(y)
        y, f = _broadcast(y, f)
        out = np.empty_like(y)
        _logp_vec(self.kind, self.param, y.ravel(), f.ravel(), out.ravel())
        return out

    def variational_expectation(self, y, m, v, rule=None):
        """E_N(f|m,v)[log p(y|f)] with derivatives in (m, v); arrays broadcast."""
        return VariationalExpectation(*self._evaluate(_varexp_vec, "expected log-likelihood", y, m, v, rule))

    def log_partition(self, y, m, v, rule=None):
        """log E_N(f|m,v)[p(y|f)] with derivatives in (m, v)."""
        return self._evaluate(_logpart_vec, "log partition", y, m, v, rule)

    def _evaluate(self, fn, what, y, m, v, rule):
        rule = rule or gh_rule()
        y = self.check_support(y)
        y, m, v = _broadcast(y, m, v)
        if np.any(~(v > 0)):
            raise ValueError(f"variance must be positive (index {int(np.flatnonzero(~(v > 0))[0])})")
        out = np.empty((3,) + y.shape)
        bad = fn(self.kind, self.param, y.ravel(), m.ravel(), v.ravel(), rule.nodes, rule.weights, out.reshape(3, -1))
        if bad >= 0:
            raise QuadratureError(f"non-finite {what} for {self.name} likelihood", index=int(bad))
        return out[0], out[1], out[2]

    # hyperparameters exposed to learning (log-transformed by the caller)
    def params(self):
        return []

    def with_params(self, values):
        return self


@dataclass(frozen=True)
class Gaussian(Likelihood):
    noise_variance: float = 1.0
    kind: ClassVar[int] = GAUSSIAN
    name: ClassVar[str] = "gaussian"

    def __post_init__(self):
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")

    @property
    def param(self):
        return float(self.noise_variance)

    def params(self):
        return [("likelihood.noise_variance", self.noise_variance)]

    def with_params(self, values):
        (value,) = values
        return Gaussian(float(value))


@dataclass(frozen=True)
class Poisson(Likelihood):
    """Counts with rate binsize * exp(f)."""

    binsize: float = 1.0
    kind: ClassVar[int] = POISSON
    name: ClassVar[str] = "poisson"

    def __post_init__(self):
        if not self.binsize > 0:
            raise ValueError("binsize must be positive")

    @property
    def param(self):
        return float(self.binsize)

    def check_support(self, y):
        y = super().check_support(y)
        bad = (y < 0) | (y != np.round(y))
        if np.any(bad):
            raise DataError(f"Poisson observations must be non-negative integers (index {int(np.flatnonzero(bad)[0])})")
        return y


@dataclass(frozen=True)
class Bernoulli(Likelihood):
    """Binary labels in {0, 1} with probit link p(y=1|f) = Phi(f)."""

    kind: ClassVar[int] = BERNOULLI
    name: ClassVar[str] = "bernoulli"

    @property
    def param(self):
        return 1.0

    def check_support(self, y):
        y = super().check_support(y)
        bad = (y != 0) & (y != 1)
        if np.any(bad):
            raise DataError(f"Bernoulli observations must be 0 or 1 (index {int(np.flatnonzero(bad)[0])})")
        return y


LIKELIHOODS = {"gaussian": Gaussian, "poisson": Poisson, "bernoulli": Bernoulli}
