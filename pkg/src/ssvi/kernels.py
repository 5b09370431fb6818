"""Stationary covariance functions with exact state-space forms.

Supported leaves are the half-integer Matérn kernels and the cosine kernel.
They can be combined with ``Sum`` (any children) and ``Product`` (one cosine
times one Matérn, which gives the usual quasi-periodic kernel).

Kernels are immutable. Hyperparameter learning goes through
:func:`kernel_params` / :func:`with_params`, which flatten a kernel tree into
an ordered list of named positive parameters and back.
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import UnsupportedKernelError


def _check_positive(obj):
    for f in fields(obj):
        value = getattr(obj, f.name)
        if not (np.isfinite(value) and value > 0):
            raise ValueError(f"{type(obj).__name__}.{f.name} must be positive, got {value!r}")


class Kernel:
    """Base class; use the concrete leaves and combinators below."""

    def __add__(self, other):
        return Sum((self, other))

    def __mul__(self, other):
        return Product((self, other))


@dataclass(frozen=True)
class _Matern(Kernel):
    variance: float = 1.0
    lengthscale: float = 1.0

    # smoothness nu = order + 1/2; state dimension is order + 1
    order = 0

    def __post_init__(self):
        _check_positive(self)


@dataclass(frozen=True)
class Matern12(_Matern):
    order = 0


@dataclass(frozen=True)
class Matern32(_Matern):
    order = 1


@dataclass(frozen=True)
class Matern52(_Matern):
    order = 2


@dataclass(frozen=True)
class Cosine(Kernel):
    """sigma^2 * cos(frequency * tau); frequency in radians per time unit."""

    variance: float = 1.0
    frequency: float = 1.0

    def __post_init__(self):
        _check_positive(self)

    @classmethod
    def from_period(cls, period, variance=1.0):
        return cls(variance=variance, frequency=2.0 * math.pi / period)


@dataclass(frozen=True)
class Sum(Kernel):
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise ValueError("Sum needs at least two children")


@dataclass(frozen=True)
class Product(Kernel):
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise ValueError("Product needs at least two children")


LEAF_NAMES = {Matern12: "matern12", Matern32: "matern32", Matern52: "matern52", Cosine: "cosine"}


def _matern_profile(order, r):
    """Normalised Matérn correlation for nu = order + 1/2 at scaled lag r = sqrt(2 nu) |tau| / l."""
    if order == 0:
        return np.exp(-r)
    if order == 1:
        return (1.0 + r) * np.exp(-r)
    if order == 2:
        return (1.0 + r + r ** 2 / 3.0) * np.exp(-r)
    raise UnsupportedKernelError(f"Matern order {order} not supported")


def kernel_eval(kernel, tau):
    """Evaluate the covariance kappa(tau); ``tau`` may be a scalar or array."""
    tau = np.abs(np.asarray(tau, dtype=float))
    if isinstance(kernel, _Matern):
        r = math.sqrt(2 * kernel.order + 1) * tau / kernel.lengthscale
        return kernel.variance * _matern_profile(kernel.order, r)
    if isinstance(kernel, Cosine):
        return kernel.variance * np.cos(kernel.frequency * tau)
    if isinstance(kernel, Sum):
        return sum(kernel_eval(c, tau) for c in kernel.children)
    if isinstance(kernel, Product):
        out = np.ones_like(tau)
        for c in kernel.children:
            out = out * kernel_eval(c, tau)
        return out
    raise UnsupportedKernelError(f"unknown kernel {kernel!r}")


def kernel_variance(kernel):
    return float(kernel_eval(kernel, 0.0))


def _leaf_gradients(kernel, tau):
    """d kappa / d log(param) for each parameter of a leaf, in field order."""
    if isinstance(kernel, _Matern):
        a = math.sqrt(2 * kernel.order + 1) * tau / kernel.lengthscale
        e = np.exp(-a)
        d_var = kernel.variance * _matern_profile(kernel.order, a)
        if kernel.order == 0:
            d_len = kernel.variance * a * e
        elif kernel.order == 1:
            d_len = kernel.variance * a ** 2 * e
        else:
            d_len = kernel.variance * a ** 2 * (1.0 + a) * e / 3.0
        return [d_var, d_len]
    if isinstance(kernel, Cosine):
        wt = kernel.frequency * tau
        return [kernel.variance * np.cos(wt), -kernel.variance * np.sin(wt) * wt]
    raise UnsupportedKernelError(f"no gradient for {kernel!r}")


def kernel_log_gradients(kernel, tau):
    """Derivatives of kappa(tau) w.r.t. the log of every parameter.

    Returns an array of shape ``(p,) + tau.shape`` ordered as :func:`kernel_params`.
    """
    tau = np.abs(np.asarray(tau, dtype=float))
    if isinstance(kernel, (_Matern, Cosine)):
        return np.stack(_leaf_gradients(kernel, tau))
    if isinstance(kernel, Sum):
        return np.concatenate([kernel_log_gradients(c, tau) for c in kernel.children])
    if isinstance(kernel, Product):
        values = [kernel_eval(c, tau) for c in kernel.children]
        blocks = []
        for i, c in enumerate(kernel.children):
            others = np.ones_like(tau)
            for j, v in enumerate(values):
                if j != i:
                    others = others * v
            blocks.append(kernel_log_gradients(c, tau) * others)
        return np.concatenate(blocks)
    raise UnsupportedKernelError(f"unknown kernel {kernel!r}")


def kernel_params(kernel, prefix=""):
    """Flatten a kernel tree into ``[(name, value), ...]`` of positive parameters."""
    if isinstance(kernel, (_Matern, Cosine)):
        base = prefix + LEAF_NAMES[type(kernel)]
        return [(f"{base}.{f.name}", getattr(kernel, f.name)) for f in fields(kernel)]
    if isinstance(kernel, (Sum, Product)):
        tag = "sum" if isinstance(kernel, Sum) else "prod"
        out = []
        for i, c in enumerate(kernel.children):
            out.extend(kernel_params(c, f"{prefix}{tag}[{i}]."))
        return out
    raise UnsupportedKernelError(f"unknown kernel {kernel!r}")


def with_params(kernel, values):
    """Rebuild ``kernel`` with parameters taken in order from ``values``."""
    it = iter(np.asarray(values, dtype=float).tolist())
    out = _rebuild(kernel, it)
    if next(it, None) is not None:
        raise ValueError("too many parameter values for kernel")
    return out


def _rebuild(kernel, it):
    if isinstance(kernel, (_Matern, Cosine)):
        try:
            updates = {f.name: next(it) for f in fields(kernel)}
        except StopIteration:
            raise ValueError("too few parameter values for kernel") from None
        return replace(kernel, **updates)
    return type(kernel)(tuple(_rebuild(c, it) for c in kernel.children))


# --- expression grammar -----------------------------------------------------

_ARG_ALIASES = {
    "var": "variance",
    "variance": "variance",
    "len": "lengthscale",
    "lengthscale": "lengthscale",
    "freq": "frequency",
    "frequency": "frequency",
    "period": "period",
}
_LEAVES = {"matern12": Matern12, "matern32": Matern32, "matern52": Matern52, "cosine": Cosine}


def parse_kernel(text):
    """Parse an expression such as ``sum(matern52(var=1, len=10), prod(cosine(period=7), matern52(len=30)))``."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"cannot parse kernel expression {text!r}: {exc.msg}") from None
    return _from_ast(tree.body)


def _number(node):
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        return -_number(node.operand)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    raise ValueError(f"kernel arguments must be numeric literals, got {ast.unparse(node)!r}")


def _from_ast(node):
    if not (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)):
        raise ValueError(f"expected a kernel call, got {ast.unparse(node)!r}")
    name = node.func.id.lower()
    if name in ("sum", "prod", "product"):
        if node.keywords:
            raise ValueError(f"{name}() takes kernels only")
        children = tuple(_from_ast(a) for a in node.args)
        return Sum(children) if name == "sum" else Product(children)
    if name not in _LEAVES:
        raise ValueError(f"unknown kernel {name!r}")
    if node.args:
        raise ValueError(f"{name}() takes keyword arguments only")
    kwargs = {}
    for kw in node.keywords:
        key = _ARG_ALIASES.get(kw.arg)
        if key is None:
            raise ValueError(f"unknown argument {kw.arg!r} for {name}")
        if key in kwargs:
            raise ValueError(f"duplicate argument {kw.arg!r} for {name}")
        kwargs[key] = _number(kw.value)
    cls = _LEAVES[name]
    if cls is Cosine:
        if "lengthscale" in kwargs:
            raise ValueError("cosine has no lengthscale")
        if "period" in kwargs:
            if "frequency" in kwargs:
                raise ValueError("give either period or frequency for cosine, not both")
            kwargs["frequency"] = 2.0 * math.pi / kwargs.pop("period")
    elif "period" in kwargs or "frequency" in kwargs:
        raise ValueError(f"{name} takes var and len only")
    return cls(**kwargs)


def format_kernel(kernel):
    """Inverse of :func:`parse_kernel` (full float precision)."""
    if isinstance(kernel, _Matern):
        return f"{LEAF_NAMES[type(kernel)]}(var={kernel.variance!r}, len={kernel.lengthscale!r})"
    if isinstance(kernel, Cosine):
        return f"cosine(var={kernel.variance!r}, freq={kernel.frequency!r})"
    tag = "sum" if isinstance(kernel, Sum) else "prod"
    return f"{tag}(" + ", ".join(format_kernel(c) for c in kernel.children) + ")"
