"""Linear-time variational inference for Gaussian processes with non-Gaussian likelihoods.

Kernels are converted to state-space form and inference runs as Kalman
filtering / RTS smoothing over Gaussian pseudo-observations whose natural
parameters are updated by natural-gradient (CVI) steps.
"""
from .kernels import Cosine, Matern12, Matern32, Matern52, Product, Sum, kernel_eval, parse_kernel
from .likelihoods import Bernoulli, Gaussian, Poisson, gh_rule
from .sites import SiteParams
from .statespace import discretize, stationary_covariance, to_state_space
from .inference import InferenceConfig, cvi_site_update, ep_site_update, run_inference
from .objectives import direct_marginal_likelihood, elbo
from .learning import FitConfig, HyperParams, fit

__version__ = "0.1.0"
