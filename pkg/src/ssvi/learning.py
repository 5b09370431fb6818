"""Hyperparameter learning: log-space parameter vectors, gradients and Adam.

Learning alternates site updates at fixed hyperparameters with one Adam
step on the objective evaluated at fixed sites.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .inference import InferenceConfig, SiteIterator, make_engine
from .kernels import kernel_params, with_params
from .objectives import OBJECTIVES, elbo, evaluate_objective

log = logging.getLogger(__name__)

FD_REL_STEP = 1e-6


@dataclass
class HyperParams:
    """Unconstrained (log) view of every kernel and likelihood hyperparameter."""

    kernel: object
    lik: object
    values: np.ndarray = None

    def __post_init__(self):
        if self.values is None:
            self.values = np.log(self.constrained_from_model())
        self.values = np.asarray(self.values, dtype=float).copy()
        if self.values.shape != (len(self.names),):
            raise ValueError(f"expected {len(self.names)} values, got shape {self.values.shape}")

    def _pairs(self):
        return kernel_params(self.kernel) + self.lik.params()

    def constrained_from_model(self):
        return np.array([v for _, v in self._pairs()], dtype=float)

    @property
    def names(self):
        return tuple(name for name, _ in self._pairs())

    @property
    def layout(self):
        return {name: i for i, name in enumerate(self.names)}

    @property
    def constrained(self):
        return np.exp(self.values)

    def with_values(self, values):
        return HyperParams(self.kernel, self.lik, values)

    def build(self, values=None):
        """(kernel, likelihood) at ``values`` (defaults to the stored vector)."""
        x = np.exp(self.values if values is None else np.asarray(values, dtype=float))
        nk = len(kernel_params(self.kernel))
        return with_params(self.kernel, x[:nk]), self.lik.with_params(x[nk:])


def finite_difference_gradient(fn, x, rel_step=FD_REL_STEP, names=None):
    """Central differences with per-coordinate step ``rel_step * max(1, |x_j|)``."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        up, down = x.copy(), x.copy()
        up[j] += h
        down[j] -= h
        f_up, f_down = fn(up), fn(down)
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            label = names[j] if names is not None else j
            raise NumericalError(f"objective not finite when perturbing coordinate {label}")
        grad[j] = (f_up - f_down) / (2.0 * h)
    return grad


def objective_at(objective, theta, t, y, sites, engine="sequential", rule=None, dense_cap=None):
    """Objective as a function of the log-hyperparameter vector, sites held fixed."""

    def fn(values):
        kernel, lik = theta.build(values)
        return evaluate_objective(objective, make_engine(engine, kernel, t, dense_cap), lik, y, sites, rule)

    return fn


def objective_gradient(objective, theta, t, y, sites, engine="sequential", rule=None, analytic=None):
    """Gradient of the objective w.r.t. ``theta.values`` at fixed sites.

    Central finite differences are the baseline. ``analytic``, if given, is a
    callable ``analytic(theta) -> gradient`` used instead; check it against
    the baseline with :func:`check_gradient`.
    """
    if analytic is not None:
        return np.asarray(analytic(theta), dtype=float)
    fn = objective_at(objective, theta, t, y, sites, engine, rule)
    return finite_difference_gradient(fn, theta.values, names=theta.names)


def check_gradient(analytic, baseline, rtol=1e-4):
    """True when ``max |analytic - baseline| <= rtol * max(|baseline|_inf, tiny)``."""
    analytic, baseline = np.asarray(analytic), np.asarray(baseline)
    scale = max(float(np.max(np.abs(baseline), initial=0.0)), 1e-300)
    return float(np.max(np.abs(analytic - baseline), initial=0.0)) <= rtol * scale


@dataclass
class Adam:
    """Adam ascent on a maximisation objective."""

    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def step(self, x, grad):
        grad = np.asarray(grad, dtype=float)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return x + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class FitConfig:
    objective: str = "elbo"
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    outer_iters: int = 500
    inner_iters: int = 1
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    engine: str = "sequential"
    dense_cap: int | None = None  # None: the dense engine's default cap

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.outer_iters < 0 or self.inner_iters < 0:
            raise ValueError("iteration counts must be non-negative")


@dataclass
class FitResult:
    theta: HyperParams
    kernel: object
    lik: object
    posterior: object
    sites: object
    trace: list  # dicts with iter, objective, grad_norm, elapsed_s
    skipped: int = 0


def fit(kernel, lik, t, y, config=None, gradient=None):
    """Alternate site updates with Adam steps on the hyperparameters.

    Each outer iteration runs ``inner_iters`` site updates at the current
    hyperparameters, evaluates the objective and its gradient at the
    resulting (fixed) sites, and takes one Adam step. A final round of
    ``inner_iters`` updates is run at the returned hyperparameters, so
    ``outer_iters = 0`` is plain inference.
    """
    config = config or FitConfig()
    t = np.asarray(t, dtype=float)
    theta = HyperParams(kernel, lik)
    it = SiteIterator(lik, y, config.inference)
    y = it.y
    engine = make_engine(config.engine, kernel, t, config.dense_cap)
    sites = it.initial_sites(engine)
    post = engine.posterior(sites)
    opt = Adam(config.lr, config.beta1, config.beta2)
    trace = []
    start = time.perf_counter()

    def inner(sites, post, engine, lik_now):
        it.lik = lik_now
        for _ in range(config.inner_iters):
            sites = it.step(sites, post)
            post = engine.posterior(sites)
        return sites, post

    for outer in range(config.outer_iters):
        try:
            _, cur_lik = theta.build()
            sites, post = inner(sites, post, engine, cur_lik)
            fn = objective_at(config.objective, theta, t, y, sites, config.engine, it.rule, config.dense_cap)
            if config.objective == "elbo":
                value = elbo(post, sites, post.log_z, cur_lik, y, it.rule).value
            else:
                value = fn(theta.values)
            if gradient is not None:
                grad = np.asarray(gradient(theta, sites), dtype=float)
            else:
                grad = finite_difference_gradient(fn, theta.values, names=theta.names)
        except NumericalError as exc:
            raise NumericalError(f"outer iteration {outer + 1}: {exc}") from exc
        theta = theta.with_values(opt.step(theta.values, grad))
        trace.append({
            "iter": outer + 1,
            "objective": float(value),
            "grad_norm": float(np.linalg.norm(grad)),
            "elapsed_s": time.perf_counter() - start,
        })
        engine = make_engine(config.engine, theta.build()[0], t, config.dense_cap)
        post = engine.posterior(sites)
        log.debug("iter %d objective %.6f |grad| %.3e", outer + 1, value, trace[-1]["grad_norm"])

    final_kernel, final_lik = theta.build()
    sites, post = inner(sites, post, engine, final_lik)
    return FitResult(theta, final_kernel, final_lik, post, sites, trace, it.skipped)
