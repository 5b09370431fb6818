"""Run configuration: a flat TOML subset with dotted keys and strict validation.

Every key is written either at top level (``kernel = "..."``) or inside a
section (``[learning]`` then ``lr = 0.05``); both spell the same dotted key
``learning.lr``. Unknown keys are errors.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import GENERATORS, TIME_UNITS
from .dense import DENSE_CAP
from .errors import ConfigError, UnsupportedKernelError
from .inference import INITS, MODES, InferenceConfig
from .kernels import parse_kernel
from .statespace import to_state_space
from .likelihoods import LIKELIHOODS
from .learning import FitConfig
from .objectives import OBJECTIVES

ENGINES = ("sequential", "dense")
FORMATS = ("series", "events")
BUILTIN = ("coal",)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v):
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


def _str(v):
    return isinstance(v, str)


def _positive(v):
    return _is_real(v) and v > 0


def _range(v):
    return isinstance(v, list) and len(v) == 2 and all(_is_real(x) for x in v) and v[0] < v[1]


# key -> (check, description)
SCHEMA = {
    "kernel": (_str, "kernel expression"),
    "engine": (lambda v: v in ENGINES, f"one of {ENGINES}"),
    "seed": (lambda v: _is_int(v) and v >= 0, "non-negative integer"),
    "dense_cap": (lambda v: _is_int(v) and v > 0, "positive integer"),
    "data.path": (_str, "path to a CSV file"),
    "data.builtin": (lambda v: v in BUILTIN, f"one of {BUILTIN}"),
    "data.format": (lambda v: v in FORMATS, f"one of {FORMATS}"),
    "data.bins": (lambda v: _is_int(v) and v > 0, "positive integer"),
    "data.range": (_range, "[t0, t1] with t0 < t1"),
    "data.time_unit": (lambda v: v in TIME_UNITS, f"one of {TIME_UNITS}"),
    "synthetic.generator": (lambda v: v in GENERATORS, f"one of {tuple(GENERATORS)}"),
    "synthetic.n": (lambda v: _is_int(v) and v >= 0, "non-negative integer"),
    "likelihood.name": (lambda v: v in LIKELIHOODS, f"one of {tuple(LIKELIHOODS)}"),
    "likelihood.noise_variance": (_positive, "positive number"),
    "likelihood.binsize": (_positive, "positive number"),
    "likelihood.quad_order": (lambda v: _is_int(v) and 1 <= v <= 100, "integer in [1, 100]"),
    "inference.mode": (lambda v: v in MODES, f"one of {MODES}"),
    "inference.rho": (lambda v: _is_real(v) and 0 < v <= 1, "number in (0, 1]"),
    "inference.init": (lambda v: v in INITS, f"one of {INITS}"),
    "inference.quad_order": (lambda v: _is_int(v) and 1 <= v <= 100, "integer in [1, 100]"),
    "learning.objective": (lambda v: v in OBJECTIVES, f"one of {OBJECTIVES}"),
    "learning.optimizer": (lambda v: v == "adam", "'adam'"),
    "learning.lr": (_positive, "positive number"),
    "learning.beta1": (lambda v: _is_real(v) and 0 <= v < 1, "number in [0, 1)"),
    "learning.beta2": (lambda v: _is_real(v) and 0 <= v < 1, "number in [0, 1)"),
    "learning.outer_iters": (lambda v: _is_int(v) and v >= 0, "non-negative integer"),
    "learning.inner_iters": (lambda v: _is_int(v) and v >= 0, "non-negative integer"),
    "output.dir": (_str, "directory path"),
}

REQUIRED = ("kernel", "likelihood.name")


def flatten(tree, prefix=""):
    out = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


@dataclass
class RunConfig:
    kernel: object
    likelihood: object
    inference: InferenceConfig
    learning: FitConfig
    engine: str = "sequential"
    seed: int = 0
    dense_cap: int = DENSE_CAP
    data: dict = field(default_factory=dict)
    synthetic: dict | None = None
    output_dir: Path = Path("out")
    source: Path | None = None
    raw: dict = field(default_factory=dict)

    @property
    def quad_order(self):
        return self.inference.quad_order


def parse_config(text, base_dir=None, source=None):
    """Parse and validate config text. Relative paths resolve against ``base_dir``."""
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source or 'config'}: {exc}") from None
    flat = flatten(tree)
    where = f"{source}: " if source else ""
    unknown = sorted(set(flat) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"{where}unknown key(s): {', '.join(unknown)}")
    for key, value in flat.items():
        check, desc = SCHEMA[key]
        if not check(value):
            raise ConfigError(f"{where}{key} must be {desc}, got {value!r}")
    missing = [k for k in REQUIRED if k not in flat]
    if missing:
        raise ConfigError(f"{where}missing required key(s): {', '.join(missing)}")
    if "likelihood.quad_order" in flat and "inference.quad_order" in flat:
        raise ConfigError(f"{where}give quad_order under likelihood or inference, not both")
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    try:
        kernel = parse_kernel(flat["kernel"])
        to_state_space(kernel)  # reject algebra with no state-space form up front
    except (ValueError, UnsupportedKernelError) as exc:
        raise ConfigError(f"{where}kernel: {exc}") from None

    lik_name = flat["likelihood.name"]
    lik_kwargs = {}
    for key, owner in (("noise_variance", "gaussian"), ("binsize", "poisson")):
        if f"likelihood.{key}" in flat:
            if lik_name != owner:
                raise ConfigError(f"{where}likelihood.{key} only applies to the {owner} likelihood")
            lik_kwargs[key] = float(flat[f"likelihood.{key}"])
    likelihood = LIKELIHOODS[lik_name](**lik_kwargs)

    inference = InferenceConfig(
        mode=flat.get("inference.mode", "cvi"),
        rho=flat.get("inference.rho"),
        init=flat.get("inference.init", "zero"),
        quad_order=flat.get("inference.quad_order", flat.get("likelihood.quad_order", InferenceConfig.quad_order)),
    )
    learning = FitConfig(
        objective=flat.get("learning.objective", "elbo"),
        lr=float(flat.get("learning.lr", 0.1)),
        beta1=float(flat.get("learning.beta1", 0.9)),
        beta2=float(flat.get("learning.beta2", 0.999)),
        outer_iters=flat.get("learning.outer_iters", 500),
        inner_iters=flat.get("learning.inner_iters", 1),
        inference=inference,
        engine=flat.get("engine", "sequential"),
        dense_cap=flat.get("dense_cap", DENSE_CAP),
    )

    data = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("data.")}
    synthetic = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("synthetic.")} or None
    sources = [k for k in ("path", "builtin") if k in data] + (["synthetic"] if synthetic else [])
    if len(sources) > 1:
        raise ConfigError(f"{where}choose one data source (data.path, data.builtin or [synthetic]), got {sources}")
    if synthetic is not None and "generator" not in synthetic:
        raise ConfigError(f"{where}synthetic.generator is required in the [synthetic] section")
    if "path" in data:
        data["path"] = str(base / data["path"])
    fmt = data.get("format", "series")
    if fmt == "events" and "path" not in data:
        raise ConfigError(f"{where}data.format = 'events' needs data.path")
    if fmt == "events" and not {"bins", "range"} <= set(data):
        raise ConfigError(f"{where}data.format = 'events' needs data.bins and data.range")
    if fmt == "series" and ({"bins", "range"} & set(data)) and "builtin" not in data:
        raise ConfigError(f"{where}data.bins / data.range only apply to event data")

    return RunConfig(
        kernel=kernel,
        likelihood=likelihood,
        inference=inference,
        learning=learning,
        engine=learning.engine,
        seed=flat.get("seed", 0),
        dense_cap=flat.get("dense_cap", DENSE_CAP),
        data=data,
        synthetic=synthetic,
        output_dir=base / flat.get("output.dir", "out"),
        source=Path(source) if source else None,
        raw=flat,
    )


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base_dir=path.parent, source=str(path))
