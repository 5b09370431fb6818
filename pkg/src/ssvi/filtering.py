"""Kalman filter and RTS smoother over Gaussian pseudo-observations.

Sites are given in natural parameters (lambda1, lambda2) per datapoint. A
site with ``lambda2 == 0`` is uninformative and the update step is skipped.
The recursions are numba-compiled loops over small dense matrices; they
return a status code instead of raising so failures can be reported with the
step index from Python.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import NumericalError
from .likelihoods import _varexp

_OK, _BAD_S, _NONFINITE, _SINGULAR, _BAD_SITE = 0, 1, 2, 3, 4
_MESSAGES = {
    _BAD_S: "innovation variance not positive",
    _NONFINITE: "non-finite filter state",
    _SINGULAR: "predicted covariance singular in smoother gain",
    _BAD_SITE: "non-finite site derivative during filter initialisation",
}


@dataclass
class PosteriorMarginals:
    m: np.ndarray
    v: np.ndarray

    def __len__(self):
        return len(self.m)


@dataclass
class FilterResult:
    means: np.ndarray
    covs: np.ndarray
    pred_means: np.ndarray
    pred_covs: np.ndarray
    log_z: float

    def predictive_marginals(self, h):
        return PosteriorMarginals(self.pred_means @ h, np.einsum("i,nij,j->n", h, self.pred_covs, h))


@dataclass
class SmootherResult:
    means: np.ndarray
    covs: np.ndarray
    marginals: PosteriorMarginals


# --- small dense helpers (numba) ----------------------------------------------


@njit(cache=True)
def _predict(A, Q, m, P, mp, Pp, tmp):
    d = m.shape[0]
    for r in range(d):
        acc = 0.0
        for c in range(d):
            acc += A[r, c] * m[c]
        mp[r] = acc
    for r in range(d):
        for c in range(d):
            acc = 0.0
            for k in range(d):
                acc += A[r, k] * P[k, c]
            tmp[r, c] = acc
    for r in range(d):
        for c in range(r, d):
            acc = 0.0
            for k in range(d):
                acc += tmp[r, k] * A[c, k]
            Pp[r, c] = acc + 0.5 * (Q[r, c] + Q[c, r])
    for r in range(d):
        for c in range(r):
            Pp[r, c] = Pp[c, r]


@njit(cache=True)
def _update(h, mp, Pp, ytil, s2til, m, P, Ph):
    """Scalar-measurement update; returns (s, eta)."""
    d = mp.shape[0]
    s = s2til
    eta = ytil
    for r in range(d):
        acc = 0.0
        for c in range(d):
            acc += Pp[r, c] * h[c]
        Ph[r] = acc
        s += h[r] * acc
        eta -= h[r] * mp[r]
    if not s > 0.0:
        return s, eta
    for r in range(d):
        m[r] = mp[r] + Ph[r] * eta / s
    for r in range(d):
        for c in range(r, d):
            val = Pp[r, c] - Ph[r] * Ph[c] / s
            P[r, c] = val
            P[c, r] = val
    return s, eta


@njit(cache=True)
def _all_finite(m, P):
    d = m.shape[0]
    for r in range(d):
        if not math.isfinite(m[r]):
            return False
        for c in range(d):
            if not math.isfinite(P[r, c]):
                return False
    return True


@njit(cache=True)
def _cholesky(S, Lc, jitter):
    d = S.shape[0]
    for r in range(d):
        for c in range(r + 1):
            acc = S[r, c]
            if r == c:
                acc += jitter
            for k in range(c):
                acc -= Lc[r, k] * Lc[c, k]
            if r == c:
                if not acc > 0.0:
                    return False
                Lc[r, r] = math.sqrt(acc)
            else:
                Lc[r, c] = acc / Lc[c, c]
        for c in range(r + 1, d):
            Lc[r, c] = 0.0
    return True


@njit(cache=True)
def _chol_solve(Lc, B, X):
    """X = (Lc Lc^T)^{-1} B, column by column."""
    d = Lc.shape[0]
    for j in range(B.shape[1]):
        for r in range(d):
            acc = B[r, j]
            for k in range(r):
                acc -= Lc[r, k] * X[k, j]
            X[r, j] = acc / Lc[r, r]
        for r in range(d - 1, -1, -1):
            acc = X[r, j]
            for k in range(r + 1, d):
                acc -= Lc[k, r] * X[k, j]
            X[r, j] = acc / Lc[r, r]


# --- recursions ------------------------------------------------------------------


@njit(cache=True)
def _filter(A, Q, index, h, Pinf, ytil, s2til, informative, means, covs, pmeans, pcovs):
    n = index.shape[0]
    d = h.shape[0]
    m = np.zeros(d)
    P = Pinf.copy()
    tmp = np.empty((d, d))
    Ph = np.empty(d)
    log_z = 0.0
    for i in range(n):
        k = index[i]
        _predict(A[k], Q[k], m, P, pmeans[i], pcovs[i], tmp)
        if informative[i]:
            s, eta = _update(h, pmeans[i], pcovs[i], ytil[i], s2til[i], m, P, Ph)
            if not s > 0.0:
                return _BAD_S, i, log_z
            log_z -= 0.5 * (math.log(2.0 * math.pi * s) + eta * eta / s)
        else:
            m[:] = pmeans[i]
            P[:, :] = pcovs[i]
        if not _all_finite(m, P):
            return _NONFINITE, i, log_z
        means[i] = m
        covs[i] = P
    return _OK, -1, log_z


@njit(cache=True)
def _filter_init(A, Q, index, h, Pinf, kind, param, y, nodes, weights, eps,
                 lam1, lam2, means, covs, pmeans, pcovs):
    n = index.shape[0]
    d = h.shape[0]
    m = np.zeros(d)
    P = Pinf.copy()
    tmp = np.empty((d, d))
    Ph = np.empty(d)
    log_z = 0.0
    for i in range(n):
        k = index[i]
        _predict(A[k], Q[k], m, P, pmeans[i], pcovs[i], tmp)
        mi = 0.0
        vi = 0.0
        for r in range(d):
            mi += h[r] * pmeans[i, r]
            for c in range(d):
                vi += h[r] * pcovs[i, r, c] * h[c]
        _, dm, dv = _varexp(kind, param, y[i], mi, vi, nodes, weights)
        if not (math.isfinite(dm) and math.isfinite(dv)):
            return _BAD_SITE, i, log_z
        l2 = min(dv, -eps)
        lam1[i] = dm - 2.0 * dv * mi
        lam2[i] = l2
        s2 = -0.5 / l2
        s, eta = _update(h, pmeans[i], pcovs[i], lam1[i] * s2, s2, m, P, Ph)
        if not s > 0.0:
            return _BAD_S, i, log_z
        log_z -= 0.5 * (math.log(2.0 * math.pi * s) + eta * eta / s)
        if not _all_finite(m, P):
            return _NONFINITE, i, log_z
        means[i] = m
        covs[i] = P
    return _OK, -1, log_z


@njit(cache=True)
def _smoother(A, index, means, covs, pmeans, pcovs, sm, sc, jitter_scale):
    n = means.shape[0]
    d = means.shape[1]
    if n == 0:
        return _OK, -1
    sm[n - 1] = means[n - 1]
    sc[n - 1] = covs[n - 1]
    Lc = np.empty((d, d))
    B = np.empty((d, d))
    X = np.empty((d, d))
    dm = np.empty(d)
    dP = np.empty((d, d))
    GdP = np.empty((d, d))
    for i in range(n - 2, -1, -1):
        Ak = A[index[i + 1]]
        Pp = pcovs[i + 1]
        Pf = covs[i]
        # B = A Pf  so that G^T = Pp^{-1} B
        for r in range(d):
            for c in range(d):
                acc = 0.0
                for k in range(d):
                    acc += Ak[r, k] * Pf[k, c]
                B[r, c] = acc
        if not _cholesky(Pp, Lc, 0.0):
            tr = 0.0
            for r in range(d):
                tr += Pp[r, r]
            if not _cholesky(Pp, Lc, jitter_scale * tr / d):
                return _SINGULAR, i
        _chol_solve(Lc, B, X)  # X = G^T
        for r in range(d):
            dm[r] = sm[i + 1, r] - pmeans[i + 1, r]
            for c in range(d):
                dP[r, c] = sc[i + 1, r, c] - Pp[r, c]
        for r in range(d):
            acc = means[i, r]
            for k in range(d):
                acc += X[k, r] * dm[k]
            sm[i, r] = acc
        for r in range(d):
            for c in range(d):
                acc = 0.0
                for k in range(d):
                    acc += X[k, r] * dP[k, c]
                GdP[r, c] = acc
        for r in range(d):
            for c in range(r, d):
                acc = 0.0
                for k in range(d):
                    acc += GdP[r, k] * X[k, c]
                val = 0.5 * (Pf[r, c] + Pf[c, r]) + acc
                sc[i, r, c] = val
                sc[i, c, r] = val
    return _OK, -1


# --- Python entry points -----------------------------------------------------------

SMOOTHER_JITTER = 1e-10


def _raise(status, index):
    if status != _OK:
        raise NumericalError(_MESSAGES[status], index=int(index))


def _alloc(n, d):
    return np.empty((n, d)), np.empty((n, d, d)), np.empty((n, d)), np.empty((n, d, d))


def kalman_filter(transitions, h, Pinf, sites):
    """Forward pass over the pseudo-observations in ``sites``.

    ``log_z`` accumulates -1/2 (log 2 pi s_i + eta_i^2 / s_i) over
    informative sites, i.e. the log marginal likelihood of the pseudo-data.
    """
    n, d = len(transitions), len(h)
    if len(sites) != n:
        raise ValueError(f"{len(sites)} sites for {n} time points")
    means, covs, pmeans, pcovs = _alloc(n, d)
    status, idx, log_z = _filter(
        transitions.A, transitions.Q, transitions.index, np.ascontiguousarray(h, dtype=float),
        np.ascontiguousarray(Pinf, dtype=float), sites.pseudo_y, np.where(sites.informative, sites.pseudo_var, 1.0),
        sites.informative, means, covs, pmeans, pcovs,
    )
    _raise(status, idx)
    return FilterResult(means, covs, pmeans, pcovs, float(log_z))


def filter_pass_init(transitions, h, Pinf, lik, y, rule, eps):
    """Forward pass that sets each site from its one-step predictive marginal (rho = 1).

    Returns ``(lambda1, lambda2, FilterResult)``.
    """
    n, d = len(transitions), len(h)
    lam1, lam2 = np.zeros(n), np.zeros(n)
    means, covs, pmeans, pcovs = _alloc(n, d)
    status, idx, log_z = _filter_init(
        transitions.A, transitions.Q, transitions.index, np.ascontiguousarray(h, dtype=float),
        np.ascontiguousarray(Pinf, dtype=float), lik.kind, lik.param, np.ascontiguousarray(y, dtype=float),
        rule.nodes, rule.weights, eps, lam1, lam2, means, covs, pmeans, pcovs,
    )
    _raise(status, idx)
    return lam1, lam2, FilterResult(means, covs, pmeans, pcovs, float(log_z))


def rts_smoother(filt, transitions, h):
    """Rauch-Tung-Striebel backward pass; gains use a Cholesky solve against P^p_{i+1}."""
    n, d = filt.means.shape
    sm, sc = np.empty((n, d)), np.empty((n, d, d))
    status, idx = _smoother(transitions.A, transitions.index, filt.means, filt.covs, filt.pred_means,
                            filt.pred_covs, sm, sc, SMOOTHER_JITTER)
    _raise(status, idx)
    h = np.asarray(h, dtype=float)
    v = np.einsum("i,nij,j->n", h, sc, h)
    if np.any(~(v > 0)):
        raise NumericalError("smoothed marginal variance not positive", index=int(np.flatnonzero(~(v > 0))[0]))
    return SmootherResult(sm, sc, PosteriorMarginals(sm @ h, v))
