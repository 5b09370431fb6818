"""Conjugate-computation variational inference (and EP) over state-space GPs.

Each iteration solves a Gaussian regression on the current pseudo-data (a
Kalman filter + RTS smoother pass, or a dense solve for the reference
engine) and then refreshes every site from the resulting marginals.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .filtering import PosteriorMarginals, kalman_filter, filter_pass_init, rts_smoother
from .likelihoods import DEFAULT_QUAD_ORDER, gh_rule
from .objectives import elbo
from .sites import EPS_SITE, SiteParams
from .statespace import discretize_grid, to_state_space

log = logging.getLogger(__name__)

MODES = ("cvi", "ep")
INITS = ("zero", "filter")


@dataclass
class Posterior:
    """Result of one conjugate solve on fixed sites."""

    marginals: PosteriorMarginals
    log_z: float
    smoother: object = None
    filter: object = None


def _as_marginals(posterior):
    if isinstance(posterior, PosteriorMarginals):
        return posterior
    return posterior.marginals


def cvi_site_update(sites, marginals, lik, y, rho, rule=None, eps=EPS_SITE):
    """Natural-gradient site step from the marginals (m_i, v_i).

    lambda1 <- (1 - rho) lambda1 + rho (dJ/dm - 2 dJ/dv m)
    lambda2 <- (1 - rho) lambda2 + rho dJ/dv,   clamped to <= -eps
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"step size rho must be in (0, 1], got {rho}")
    marg = _as_marginals(marginals)
    ve = lik.variational_expectation(y, marg.m, marg.v, rule or gh_rule())
    bad = ~(np.isfinite(ve.d_m) & np.isfinite(ve.d_v))
    if np.any(bad):
        raise NumericalError("non-finite site derivative", index=int(np.flatnonzero(bad)[0]))
    lam1 = (1.0 - rho) * sites.lambda1 + rho * (ve.d_m - 2.0 * ve.d_v * marg.m)
    lam2 = (1.0 - rho) * sites.lambda2 + rho * ve.d_v
    return SiteParams(lam1, np.minimum(lam2, -eps))


def ep_site_update(sites, marginals, lik, y, rho, rule=None, eps=EPS_SITE):
    """Damped moment-matching EP step.

    The cavity removes the current site from the marginal; the tilted moments
    come from log Z_i = log E_cavity[p(y_i | f_i)] and its derivatives.
    Sites whose cavity (or matched marginal) has non-positive variance are
    left unchanged. Returns ``(new_sites, n_skipped)``.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"step size rho must be in (0, 1], got {rho}")
    marg = _as_marginals(marginals)
    y = np.asarray(y, dtype=float)
    site_prec = -2.0 * sites.lambda2
    cav_prec = 1.0 / marg.v - site_prec
    ok = cav_prec > 0
    lam1, lam2 = sites.lambda1.copy(), sites.lambda2.copy()
    if np.any(ok):
        v_c = 1.0 / cav_prec[ok]
        m_c = v_c * (marg.m[ok] / marg.v[ok] - sites.lambda1[ok])
        _, alpha, beta = lik.log_partition(y[ok], m_c, v_c, rule or gh_rule())
        curv = 2.0 * beta - alpha ** 2  # d^2 log Z / dm^2
        v_new = v_c + v_c ** 2 * curv
        m_new = m_c + v_c * alpha
        with np.errstate(divide="ignore", invalid="ignore"):
            new_prec = 1.0 / v_new - 1.0 / v_c
            new_l1 = m_new / v_new - m_c / v_c
        good = (v_new > 0) & (new_prec > 0) & np.isfinite(new_l1)
        idx = np.flatnonzero(ok)[good]
        lam1[idx] = (1.0 - rho) * lam1[idx] + rho * new_l1[good]
        lam2[idx] = np.minimum((1.0 - rho) * lam2[idx] + rho * (-0.5 * new_prec[good]), -eps)
        ok[np.flatnonzero(ok)[~good]] = False
    skipped = int(np.count_nonzero(~ok))
    if skipped:
        log.debug("EP skipped %d site updates", skipped)
    return SiteParams(lam1, lam2), skipped


class SequentialEngine:
    """O(n) conjugate solver: Kalman filter + RTS smoother on the state-space form."""

    name = "sequential"

    def __init__(self, kernel, t):
        self.kernel = kernel
        self.t = np.asarray(t, dtype=float)
        self.model = to_state_space(kernel)
        self.transitions = discretize_grid(self.model, self.t)

    @property
    def h(self):
        return self.model.h

    def posterior(self, sites):
        filt = kalman_filter(self.transitions, self.model.h, self.model.Pinf, sites)
        smooth = rts_smoother(filt, self.transitions, self.model.h)
        return Posterior(smooth.marginals, filt.log_z, smooth, filt)

    def predictive(self, sites):
        filt = kalman_filter(self.transitions, self.model.h, self.model.Pinf, sites)
        return filt.predictive_marginals(self.model.h)

    def filter_init(self, lik, y, rule, eps=EPS_SITE):
        lam1, lam2, _ = filter_pass_init(self.transitions, self.model.h, self.model.Pinf, lik, y, rule, eps)
        return SiteParams(lam1, lam2)


def filter_init(transitions, h, Pinf, lik, y, rule=None, eps=EPS_SITE):
    """Initialise sites in a single forward pass.

    At step i the one-step predictive marginal N(h^T m^p_i, h^T P^p_i h)
    feeds a full (rho = 1) CVI site update, and the Kalman update then uses
    the fresh pseudo-observation before moving on.
    """
    lam1, lam2, _ = filter_pass_init(transitions, h, Pinf, lik, lik.check_support(y), rule or gh_rule(), eps)
    return SiteParams(lam1, lam2)


def make_engine(engine, kernel, t, dense_cap=None):
    """Engine by name; ``dense_cap`` (if given) overrides the dense engine's size cap."""
    if not isinstance(engine, str):
        return engine
    if engine == "sequential":
        return SequentialEngine(kernel, t)
    if engine == "dense":
        from .dense import DenseEngine

        return DenseEngine(kernel, t) if dense_cap is None else DenseEngine(kernel, t, cap=dense_cap)
    raise ValueError(f"unknown engine {engine!r}")


@dataclass
class InferenceConfig:
    mode: str = "cvi"
    rho: float | None = None  # None: 1.0 on the first iteration, then DEFAULT_RHO
    iters: int = 20
    init: str = "zero"
    quad_order: int = DEFAULT_QUAD_ORDER

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.rho is not None and not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")
        if self.iters < 0:
            raise ValueError("iters must be non-negative")

    def step_size(self, k):
        """Step size for the k-th site update (k counts from 1)."""
        if self.rho is not None:
            return float(self.rho)
        return 1.0 if k == 1 else DEFAULT_RHO


DEFAULT_RHO = 0.5


@dataclass
class InferenceResult:
    posterior: Posterior
    sites: SiteParams
    trace: list = field(default_factory=list)
    skipped: int = 0

    @property
    def marginals(self):
        return self.posterior.marginals

    @property
    def smoother(self):
        return self.posterior.smoother


class SiteIterator:
    """Stateful CVI / EP iteration at fixed hyperparameters.

    Keeps the step counter across calls so the step-size schedule continues
    when inference is interleaved with hyperparameter updates.
    """

    def __init__(self, lik, y, config):
        self.lik = lik
        self.y = lik.check_support(y)
        self.config = config
        self.rule = gh_rule(config.quad_order)
        self.k = 0
        self.skipped = 0

    def initial_sites(self, engine):
        if self.config.init == "filter" and len(self.y):
            return engine.filter_init(self.lik, self.y, self.rule)
        return SiteParams.zeros(len(self.y))

    def objective(self, posterior, sites):
        if self.config.mode == "cvi":
            return elbo(posterior, sites, posterior.log_z, self.lik, self.y, self.rule).value
        return posterior.log_z

    def step(self, sites, posterior):
        self.k += 1
        rho = self.config.step_size(self.k)
        if self.config.mode == "cvi":
            return cvi_site_update(sites, posterior.marginals, self.lik, self.y, rho, self.rule)
        new, skipped = ep_site_update(sites, posterior.marginals, self.lik, self.y, rho, self.rule)
        self.skipped += skipped
        return new


def run_inference(kernel, lik, t, y, config=None, engine="sequential", sites=None):
    """Iterate {conjugate solve -> site update} at fixed hyperparameters.

    ``trace[k]`` is the objective after k updates (ELBO for CVI, the
    pseudo-data log marginal likelihood for EP); ``trace[0]`` is the initial
    state. Returns an :class:`InferenceResult`.
    """
    config = config or InferenceConfig()
    t = np.asarray(t, dtype=float)
    if len(t) != len(np.atleast_1d(y)):
        raise ValueError("t and y must have the same length")
    engine = make_engine(engine, kernel, t)
    it = SiteIterator(lik, y, config)
    try:
        sites = sites.copy() if sites is not None else it.initial_sites(engine)
        post = engine.posterior(sites)
        trace = [it.objective(post, sites)]
    except NumericalError as exc:
        raise NumericalError(f"inference initial state: {exc}") from exc
    for k in range(config.iters):
        try:
            sites = it.step(sites, post)
            post = engine.posterior(sites)
        except NumericalError as exc:
            raise NumericalError(f"inference iteration {k + 1}: {exc}") from exc
        trace.append(it.objective(post, sites))
    return InferenceResult(post, sites, trace, it.skipped)
