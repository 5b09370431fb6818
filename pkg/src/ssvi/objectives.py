"""Training objectives: the ELBO and the filter-factorised marginal likelihood."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .filtering import kalman_filter
from .likelihoods import gh_rule
from .sites import SiteParams

OBJECTIVES = ("elbo", "direct_ml")


@dataclass
class ObjectiveReport:
    value: float
    varexp_sum: float = math.nan
    log_z: float = math.nan
    site_correction: float = math.nan
    gradient: np.ndarray | None = None


def _marginals(posterior):
    return getattr(posterior, "marginals", posterior)


def expected_site_log_density(sites, m, v):
    """E_q[log N(y_tilde_i | f_i, s2_i)] summed over informative sites."""
    info = sites.informative
    s2 = sites.pseudo_var[info]
    r = sites.pseudo_y[info] - m[info]
    return float(np.sum(-0.5 * np.log(2.0 * math.pi * s2) - (r * r + v[info]) / (2.0 * s2)))


def elbo(posterior, sites, log_z, lik, y, rule=None):
    """Evidence lower bound of the site-conjugate posterior.

    ``sum_i J_i + log Z(GP) - sum_i E_q[log N(y_tilde_i | f_i, s2_i)]``, where
    ``log_z`` is the log marginal likelihood of the pseudo-data and
    ``posterior`` carries the marginals (m_i, v_i). Uninformative sites
    contribute J_i only.
    """
    marg = _marginals(posterior)
    if len(marg.m) == 0:
        return ObjectiveReport(0.0, 0.0, 0.0, 0.0)
    ve = lik.variational_expectation(y, marg.m, marg.v, rule or gh_rule())
    varexp_sum = float(np.sum(ve.value))
    correction = expected_site_log_density(sites, marg.m, marg.v)
    for name, term in (("varexp_sum", varexp_sum), ("log_z", log_z), ("site_correction", correction)):
        if not np.isfinite(term):
            raise NumericalError(f"ELBO term {name} is not finite")
    return ObjectiveReport(varexp_sum + log_z - correction, varexp_sum, float(log_z), correction)


def predictive_log_likelihood(predictive, lik, y, rule=None):
    """sum_i log int p(y_i | f) N(f | m_i, v_i) df over one-step predictive marginals."""
    if len(predictive.m) == 0:
        return 0.0
    value, _, _ = lik.log_partition(y, predictive.m, predictive.v, rule or gh_rule())
    return float(np.sum(value))


def direct_marginal_likelihood(transitions, h, Pinf, lik, y, rule=None, sites=None):
    """Filter-factorised evidence sum_i log p(y_i | y_{1:i-1}).

    States are propagated with the pseudo-observations in ``sites`` (all
    uninformative if omitted); each conditional integrates the true
    likelihood against the filter's predictive marginal.
    """
    sites = sites if sites is not None else SiteParams.zeros(len(transitions))
    filt = kalman_filter(transitions, h, Pinf, sites)
    return predictive_log_likelihood(filt.predictive_marginals(np.asarray(h, dtype=float)), lik, y, rule)


def evaluate_objective(objective, engine, lik, y, sites, rule=None):
    """Objective value for a built engine at fixed sites."""
    if objective == "elbo":
        post = engine.posterior(sites)
        return elbo(post, sites, post.log_z, lik, y, rule).value
    if objective == "direct_ml":
        return predictive_log_likelihood(engine.predictive(sites), lik, y, rule)
    raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
