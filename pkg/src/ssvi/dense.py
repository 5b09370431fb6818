"""Dense O(n^3) reference solver.

Builds the Gram matrix from :func:`kernel_eval` and conditions on the
pseudo-observations directly. It shares likelihoods, sites and the update
rules with the sequential engine, so comparisons isolate the conjugate
solve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError
from .filtering import PosteriorMarginals
from .inference import InferenceConfig, Posterior, run_inference
from .kernels import kernel_eval, kernel_log_gradients
from .sites import EPS_SITE, SiteParams

DENSE_CAP = 2000
JITTER_START = 1e-10
JITTER_MAX = 1e-6


@dataclass
class DenseGram:
    K: np.ndarray
    jitter: float = 0.0


def gram(kernel, t):
    t = np.asarray(t, dtype=float)
    K = kernel_eval(kernel, t[:, None] - t[None, :])
    return DenseGram(0.5 * (K + K.T))


def _cholesky(C):
    """Lower Cholesky factor with jitter escalated x10 up to JITTER_MAX * mean diagonal."""
    scale = float(np.mean(np.diag(C))) if C.size else 1.0
    if not scale > 0:
        raise NumericalError("dense Cholesky failed: non-positive mean diagonal")
    jitter = 0.0
    while True:
        try:
            return scipy.linalg.cholesky(C + jitter * np.eye(len(C)), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * scale * (1 + 1e-9):
                raise NumericalError("dense Cholesky failed after maximum jitter") from None


def dense_regression(K, y_tilde, sigma_tilde_sq):
    """Exact GP regression on pseudo-data; rows with infinite variance are ignored.

    Returns ``(PosteriorMarginals, log_z)`` where
    ``log_z = -1/2 log|K_y| - 1/2 y^T K_y^{-1} y - n/2 log 2 pi`` over the
    informative rows.
    """
    K = K.K if isinstance(K, DenseGram) else np.asarray(K, dtype=float)
    y_tilde = np.asarray(y_tilde, dtype=float)
    s2 = np.asarray(sigma_tilde_sq, dtype=float)
    if np.any(~(s2 > 0)):
        raise ValueError("pseudo-variances must be positive")
    info = np.isfinite(s2)
    prior_v = np.diag(K).copy()
    if not np.any(info):
        return PosteriorMarginals(np.zeros(len(K)), prior_v), 0.0
    Ky = K[np.ix_(info, info)] + np.diag(s2[info])
    L, _ = _cholesky(Ky)
    yi = y_tilde[info]
    e = scipy.linalg.solve_triangular(L, yi, lower=True)
    alpha = scipy.linalg.solve_triangular(L.T, e, lower=False)
    Kx = K[info, :]
    m = Kx.T @ alpha
    W = scipy.linalg.solve_triangular(L, Kx, lower=True)
    v = prior_v - np.sum(W * W, axis=0)
    log_z = -0.5 * float(e @ e) - float(np.sum(np.log(np.diag(L)))) - 0.5 * yi.size * math.log(2.0 * math.pi)
    if np.any(~(v > 0)):
        raise NumericalError("dense posterior variance not positive", index=int(np.flatnonzero(~(v > 0))[0]))
    return PosteriorMarginals(m, v), log_z


def _sequential_conditioning(K, site_at):
    """Condition point by point, as a filter would, but with dense algebra.

    ``site_at(i, m, v)`` receives the predictive marginal of f_i given the
    earlier pseudo-observations and returns ``(y_tilde, s2)`` for point i,
    or ``None`` for an uninformative site.
    """
    n = len(K)
    L = np.zeros((n, n))
    e = np.zeros(n)
    rows = np.zeros(n, dtype=np.int64)
    pm, pv = np.zeros(n), np.zeros(n)
    r = 0
    for i in range(n):
        if r:
            z = scipy.linalg.solve_triangular(L[:r, :r], K[rows[:r], i], lower=True, check_finite=False)
        else:
            z = np.zeros(0)
        pm[i] = z @ e[:r]
        pv[i] = K[i, i] - z @ z
        site = site_at(i, pm[i], pv[i])
        if site is None:
            continue
        yt, s2 = site
        L[r, :r] = z
        L[r, r] = math.sqrt(pv[i] + s2)
        e[r] = (yt - pm[i]) / L[r, r]
        rows[r] = i
        r += 1
    return PosteriorMarginals(pm, pv)


class DenseEngine:
    """Drop-in replacement for :class:`~ssvi.inference.SequentialEngine`."""

    name = "dense"

    def __init__(self, kernel, t, cap=DENSE_CAP):
        t = np.asarray(t, dtype=float)
        if len(t) > cap:
            raise ValueError(f"dense engine limited to n <= {cap} (got {len(t)}); use the sequential engine")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("time points must be strictly increasing")
        self.kernel = kernel
        self.t = t
        self.gram = gram(kernel, t)

    def posterior(self, sites):
        marg, log_z = dense_regression(self.gram, sites.pseudo_y, sites.pseudo_var)
        return Posterior(marg, log_z)

    def predictive(self, sites):
        y_t, s2 = sites.pseudo_y, sites.pseudo_var
        info = sites.informative
        return _sequential_conditioning(self.gram.K, lambda i, m, v: (y_t[i], s2[i]) if info[i] else None)

    def filter_init(self, lik, y, rule, eps=EPS_SITE):
        n = len(self.t)
        lam1, lam2 = np.zeros(n), np.zeros(n)

        def site_at(i, m, v):
            ve = lik.variational_expectation(y[i], m, v, rule)
            dm, dv = float(ve.d_m[0]), float(ve.d_v[0])
            lam1[i] = dm - 2.0 * dv * m
            lam2[i] = min(dv, -eps)
            s2 = -0.5 / lam2[i]
            return lam1[i] * s2, s2

        _sequential_conditioning(self.gram.K, site_at)
        return SiteParams(lam1, lam2)


def dense_cvi(kernel, lik, t, y, rho=None, iters=20, init="zero", cap=DENSE_CAP, quad_order=None):
    """Dense CVI: identical updates to the sequential engine with a dense conjugate solve.

    Returns ``(marginals, sites, elbo_trace)``.
    """
    cfg = InferenceConfig(mode="cvi", rho=rho, iters=iters, init=init)
    if quad_order is not None:
        cfg.quad_order = quad_order
    res = run_inference(kernel, lik, t, y, cfg, engine=DenseEngine(kernel, t, cap=cap))
    return res.marginals, res.sites, res.trace


def gaussian_log_marginal_likelihood(kernel, lik, t, y):
    """log N(y | 0, K + s2 I) and its gradient w.r.t. the log-hyperparameters.

    The gradient is ordered as :class:`~ssvi.learning.HyperParams` (kernel
    parameters, then the noise variance) and uses
    d/dtheta = 1/2 tr((alpha alpha^T - K_y^{-1}) dK_y/dtheta).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    s2 = lik.noise_variance
    tau = t[:, None] - t[None, :]
    Ky = kernel_eval(kernel, tau) + s2 * np.eye(len(t))
    factor = scipy.linalg.cho_factor(Ky, lower=True)
    alpha = scipy.linalg.cho_solve(factor, y)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    value = -0.5 * float(y @ alpha) - 0.5 * logdet - 0.5 * len(t) * math.log(2.0 * math.pi)
    W = np.outer(alpha, alpha) - scipy.linalg.cho_solve(factor, np.eye(len(t)))
    dK = kernel_log_gradients(kernel, tau)
    grad = [0.5 * float(np.sum(W * dk)) for dk in dK]
    grad.append(0.5 * s2 * float(np.trace(W)))
    return value, np.array(grad)
