"""Latent predictions at arbitrary inputs from a fitted state-space posterior."""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NumericalError
from .filtering import PosteriorMarginals
from .statespace import discretize


def _rts_step(model, m_prev, P_prev, dt_prev, t_gap, m_next_s, P_next_s):
    """Predict from the previous filter state and correct with the next smoothed state."""
    tr = discretize(model, dt_prev)
    mp = tr.A @ m_prev
    Pp = tr.A @ P_prev @ tr.A.T + tr.Q
    if m_next_s is None:
        return mp, Pp
    nxt = discretize(model, t_gap)
    Pn = nxt.A @ Pp @ nxt.A.T + nxt.Q
    G = scipy.linalg.solve(Pn, nxt.A @ Pp, assume_a="pos").T
    m = mp + G @ (m_next_s - nxt.A @ mp)
    P = Pp + G @ (P_next_s - Pn) @ G.T
    return m, 0.5 * (P + P.T)


def predict_latent(model, t, filt, smooth, t_star):
    """Marginals of f(t*) under the smoothed posterior.

    Off-grid points use the filter prediction from the nearest earlier time
    point (the prior before the first one) followed by one smoothing step
    against the next training point. Points on the grid return the smoother
    marginals unchanged.
    """
    t = np.asarray(t, dtype=float)
    t_star = np.asarray(t_star, dtype=float)
    if not np.all(np.isfinite(t_star)):
        raise NumericalError("prediction inputs must be finite", index=int(np.flatnonzero(~np.isfinite(t_star))[0]))
    h = model.h
    m_out, v_out = np.empty(t_star.size), np.empty(t_star.size)
    n = t.size
    zero = np.zeros(model.d)
    for j, ts in enumerate(t_star):
        k = int(np.searchsorted(t, ts, side="right")) - 1  # last training index with t_k <= t*
        if k >= 0 and t[k] == ts:
            m_out[j] = smooth.marginals.m[k]
            v_out[j] = smooth.marginals.v[k]
            continue
        nxt = k + 1
        if k < 0:
            m_prev, P_prev, dt_prev = zero, model.Pinf, 0.0
        else:
            m_prev, P_prev, dt_prev = filt.means[k], filt.covs[k], ts - t[k]
        if nxt < n:
            m, P = _rts_step(model, m_prev, P_prev, dt_prev, t[nxt] - ts, smooth.means[nxt], smooth.covs[nxt])
        else:
            m, P = _rts_step(model, m_prev, P_prev, dt_prev, None, None, None)
        m_out[j] = h @ m
        v_out[j] = h @ P @ h
    bad = ~(np.isfinite(m_out) & (v_out > 0))
    if np.any(bad):
        raise NumericalError("non-finite predictive marginal", index=int(np.flatnonzero(bad)[0]))
    return PosteriorMarginals(m_out, v_out)
