"""Continuous-time state-space (LTI SDE) forms of kernels and their discretisation.

A kernel kappa is represented by the SDE ``df = F f dt + L dbeta`` with
Brownian diffusion ``Qc``, measurement ``f(t) = h^T f(t)`` and stationary
state covariance ``Pinf``, so that ``kappa(tau) = h^T expm(F tau) Pinf h``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np
import scipy.linalg

from .errors import UnsupportedKernelError
from .kernels import Cosine, Product, Sum, _Matern

LYAPUNOV_RTOL = 1e-10
# eigenvalues of Q below -Q_NEG_TOL * max(1, |Pinf|) are construction bugs, above are roundoff
Q_NEG_TOL = 1e-12
# steps whose dt agree to this many significant digits share one transition
DT_SIGNIFICANT_DIGITS = 12


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StateSpaceModel:
    F: np.ndarray
    L: np.ndarray
    Qc: np.ndarray
    h: np.ndarray
    Pinf: np.ndarray
    # how expm(F dt) factorises: ("expm",), ("rotation", w), ("blocks", models) or ("kron", a, b)
    structure: tuple = field(default=("expm",), compare=False, repr=False)

    def __post_init__(self):
        for name in ("F", "L", "Qc", "h", "Pinf"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def d(self):
        return self.F.shape[0]

    @property
    def s(self):
        return self.L.shape[1]

    def transition_matrices(self, dt):
        """expm(F dt) for a vector of steps, shape ``(len(dt), d, d)``."""
        return _expm_batch(self, np.asarray(dt, dtype=float).reshape(-1))

    def covariance(self, tau):
        """h^T expm(F |tau|) Pinf h, evaluated through the state-space form."""
        tau = np.asarray(tau, dtype=float)
        A = self.transition_matrices(np.abs(tau).ravel())
        return (A @ (self.Pinf @ self.h) @ self.h).reshape(tau.shape)


def _expm_batch(model, dt):
    kind = model.structure[0]
    if kind == "rotation":
        c, s = np.cos(model.structure[1] * dt), np.sin(model.structure[1] * dt)
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    if kind == "blocks":
        out = np.zeros((dt.size, model.d, model.d))
        k = 0
        for child in model.structure[1]:
            out[:, k:k + child.d, k:k + child.d] = _expm_batch(child, dt)
            k += child.d
        return out
    if kind == "kron":
        # F = Fa (x) I + I (x) Fb and the two terms commute
        a, b = (_expm_batch(m, dt) for m in model.structure[1:])
        return np.einsum("nij,nkl->nikjl", a, b).reshape(dt.size, model.d, model.d)
    return scipy.linalg.expm(model.F[None] * dt[:, None, None])


@dataclass(frozen=True)
class DiscreteTransition:
    A: np.ndarray
    Q: np.ndarray
    dt: float


def stationary_covariance(F, L, Qc, pinf=None, name="block"):
    """Solve ``F P + P F^T + L Qc L^T = 0`` for the stationary covariance.

    Blocks without diffusion (``Qc == 0``, e.g. the cosine rotation) have no
    unique Lyapunov solution; their covariance must be supplied as ``pinf``
    and is returned unchanged.
    """
    F, L, Qc = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (F, L, Qc))
    if not np.any(Qc):
        if pinf is None:
            raise ValueError(f"{name}: zero diffusion, stationary covariance must be given")
        return np.asarray(pinf, dtype=float)
    LQL = L @ Qc @ L.T
    try:
        P = scipy.linalg.solve_continuous_lyapunov(F, -LQL)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise RuntimeError(f"{name}: Lyapunov solve failed ({exc})") from exc
    P = 0.5 * (P + P.T)
    resid = np.linalg.norm(F @ P + P @ F.T + LQL)
    if not np.isfinite(resid) or resid > LYAPUNOV_RTOL * max(np.linalg.norm(P), 1e-300):
        raise RuntimeError(f"{name}: Lyapunov solve did not converge (residual {resid:.3e})")
    return P


def _matern_ssm(kernel):
    d = kernel.order + 1
    lam = np.sqrt(2 * kernel.order + 1) / kernel.lengthscale
    F = np.diag(np.ones(d - 1), 1)
    F[-1, :] = [-comb(d, k) * lam ** (d - k) for k in range(d)]
    L = np.zeros((d, 1))
    L[-1, 0] = 1.0
    q = kernel.variance * factorial(d - 1) ** 2 / factorial(2 * d - 2) * (2 * lam) ** (2 * d - 1)
    Qc = np.array([[q]])
    h = np.zeros(d)
    h[0] = 1.0
    Pinf = stationary_covariance(F, L, Qc, name=f"matern{2 * kernel.order + 1}2")
    return StateSpaceModel(F, L, Qc, h, Pinf)


def _cosine_ssm(kernel):
    w = kernel.frequency
    F = np.array([[0.0, -w], [w, 0.0]])
    return StateSpaceModel(F, np.eye(2), np.zeros((2, 2)), np.array([1.0, 0.0]), kernel.variance * np.eye(2),
                           ("rotation", w))


def _sum_ssm(models):
    return StateSpaceModel(
        scipy.linalg.block_diag(*[m.F for m in models]),
        scipy.linalg.block_diag(*[m.L for m in models]),
        scipy.linalg.block_diag(*[m.Qc for m in models]),
        np.concatenate([m.h for m in models]),
        scipy.linalg.block_diag(*[m.Pinf for m in models]),
        ("blocks", tuple(models)),
    )


def _quasi_periodic_ssm(cos, mat):
    # state = cos (x) matern; the rotation part has no diffusion, so the
    # Kronecker Pinf solves the joint Lyapunov equation with Qc = Pc (x) Qc_m
    Ic, Im = np.eye(cos.d), np.eye(mat.d)
    return StateSpaceModel(
        np.kron(cos.F, Im) + np.kron(Ic, mat.F),
        np.kron(Ic, mat.L),
        np.kron(cos.Pinf, mat.Qc),
        np.kron(cos.h, mat.h),
        np.kron(cos.Pinf, mat.Pinf),
        ("kron", cos, mat),
    )


def to_state_space(kernel):
    """Convert a kernel to its :class:`StateSpaceModel`."""
    if isinstance(kernel, _Matern):
        return _matern_ssm(kernel)
    if isinstance(kernel, Cosine):
        return _cosine_ssm(kernel)
    if isinstance(kernel, Sum):
        return _sum_ssm([to_state_space(c) for c in kernel.children])
    if isinstance(kernel, Product):
        kids = kernel.children
        cos = [c for c in kids if isinstance(c, Cosine)]
        mat = [c for c in kids if isinstance(c, _Matern)]
        if len(kids) == 2 and len(cos) == 1 and len(mat) == 1:
            return _quasi_periodic_ssm(_cosine_ssm(cos[0]), _matern_ssm(mat[0]))
        raise UnsupportedKernelError(
            "unsupported kernel algebra: only prod(cosine, matern) products have a state-space form, "
            f"got {kernel!r}"
        )
    raise UnsupportedKernelError(f"unknown kernel {kernel!r}")


def _process_noise(Pinf, A):
    Q = Pinf - A @ Pinf @ np.swapaxes(A, -1, -2)
    Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))
    if Q.ndim == 2:
        Q = Q[None]
    tol = Q_NEG_TOL * max(1.0, np.linalg.norm(Pinf, 2))
    w = np.linalg.eigvalsh(Q)
    if np.any(w < -tol):
        bad = int(np.argmin(w.min(axis=1)))
        raise RuntimeError(f"process noise not PSD (min eigenvalue {w.min():.3e} at transition {bad})")
    neg = np.flatnonzero(w.min(axis=1) < 0.0)
    if neg.size:
        w_, V = np.linalg.eigh(Q[neg])
        Qn = (V * np.clip(w_, 0.0, None)[:, None, :]) @ np.swapaxes(V, -1, -2)
        Q[neg] = 0.5 * (Qn + np.swapaxes(Qn, -1, -2))
    return Q


def discretize(model, dt):
    """Transition ``A = expm(F dt)`` and noise ``Q = Pinf - A Pinf A^T`` for one step."""
    dt = float(dt)
    if not dt >= 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    if dt == 0.0:
        return DiscreteTransition(np.eye(model.d), np.zeros((model.d, model.d)), 0.0)
    A = model.transition_matrices([dt])
    return DiscreteTransition(A[0], _process_noise(model.Pinf, A)[0], dt)


@dataclass(frozen=True)
class Transitions:
    """Per-step transitions for a time grid, deduplicated by step size.

    Step ``i`` uses ``A[index[i]]`` and ``Q[index[i]]``. Step 0 is the
    identity, so the first prediction is the stationary prior.
    """

    A: np.ndarray
    Q: np.ndarray
    index: np.ndarray
    dt: np.ndarray

    def __len__(self):
        return len(self.index)

    def step(self, i):
        k = self.index[i]
        return DiscreteTransition(self.A[k], self.Q[k], float(self.dt[k]))


def _round_significant(x, digits):
    out = np.zeros_like(x)
    nz = x > 0
    exponent = np.floor(np.log10(x[nz]))
    scale = 10.0 ** (digits - 1 - exponent)
    out[nz] = np.round(x[nz] * scale) / scale
    return out


def step_sizes(t):
    t = np.asarray(t, dtype=float)
    if t.size == 0:
        return t.copy()
    dt = np.diff(t, prepend=t[0])
    if np.any(dt[1:] <= 0):
        i = int(np.flatnonzero(dt[1:] <= 0)[0]) + 1
        raise ValueError(f"time points must be strictly increasing (index {i})")
    return dt


def discretize_grid(model, t):
    """Build :class:`Transitions` for the time points ``t`` (strictly increasing)."""
    dt = step_sizes(t)
    keys, first, index = np.unique(
        _round_significant(dt, DT_SIGNIFICANT_DIGITS), return_index=True, return_inverse=True
    )
    reps = dt[first]
    A = model.transition_matrices(reps)
    Q = _process_noise(model.Pinf, A) if reps.size else np.zeros_like(A)
    if reps.size and reps[0] == 0.0:
        A[0] = np.eye(model.d)
        Q[0] = 0.0
    return Transitions(A, Q, index.astype(np.int64).ravel(), reps)
