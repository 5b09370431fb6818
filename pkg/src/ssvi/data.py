"""Dataset loading, event binning and synthetic data generators."""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DataError
from .kernels import Matern52
from .statespace import discretize_grid, to_state_space

TIME_UNITS = ("raw", "years", "days")
_EPOCH = dt.date(1970, 1, 1)


@dataclass
class Dataset:
    t: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.t.shape != self.y.shape or self.t.ndim != 1:
            raise DataError("t and y must be 1-d arrays of equal length")
        bad = np.flatnonzero(np.diff(self.t) <= 0)
        if bad.size:
            raise DataError(f"time points must be strictly increasing (index {int(bad[0]) + 1})")
        self.meta.setdefault("n", int(self.t.size))

    def __len__(self):
        return int(self.t.size)


def _parse_time(text, unit):
    try:
        value = float(text)
    except ValueError:
        value = None
    if value is not None:
        return value
    if unit == "raw":
        raise ValueError(f"not a number: {text!r}")
    day = dt.date.fromisoformat(text.strip()[:10])
    if unit == "days":
        return float((day - _EPOCH).days)
    start = dt.date(day.year, 1, 1)
    length = (dt.date(day.year + 1, 1, 1) - start).days
    return day.year + (day - start).days / length


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if row and any(cell.strip() for cell in row):
                yield lineno, [cell.strip() for cell in row]


def _looks_like_header(cells):
    try:
        float(cells[-1])
        return False
    except ValueError:
        return True


def ingest_csv(path, time_unit="raw"):
    """Read a two-column (t, y) CSV, with or without a header row.

    Rows must be strictly increasing in t; NaN / Inf are rejected with the
    row number. ``time_unit`` controls how non-numeric times (ISO dates) are
    converted: ``years`` to fractional years, ``days`` to days since
    1970-01-01.
    """
    if time_unit not in TIME_UNITS:
        raise DataError(f"time_unit must be one of {TIME_UNITS}")
    ts, ys = [], []
    prev = None
    for k, (lineno, cells) in enumerate(_rows(path)):
        if k == 0 and _looks_like_header(cells):
            continue
        if len(cells) != 2:
            raise DataError(f"{path}: row {lineno}: expected 2 columns, got {len(cells)}")
        try:
            t = _parse_time(cells[0], time_unit)
        except ValueError as exc:
            raise DataError(f"{path}: row {lineno}, column 1: {exc}") from None
        try:
            y = float(cells[1])
        except ValueError:
            raise DataError(f"{path}: row {lineno}, column 2: not a number: {cells[1]!r}") from None
        for col, value in ((1, t), (2, y)):
            if not math.isfinite(value):
                raise DataError(f"{path}: row {lineno}, column {col}: non-finite value")
        if prev is not None and t <= prev:
            what = "duplicate timestamp" if t == prev else "timestamps not increasing"
            raise DataError(f"{path}: row {lineno}: {what}")
        prev = t
        ts.append(t)
        ys.append(y)
    return Dataset(np.array(ts), np.array(ys), {"source": str(path), "time_unit": time_unit})


def read_events(path, time_unit="raw"):
    """Event times from a one-column CSV (optional header)."""
    out = []
    for k, (lineno, cells) in enumerate(_rows(path)):
        if k == 0 and _looks_like_header(cells) and time_unit == "raw":
            continue
        try:
            value = _parse_time(cells[0], time_unit)
        except ValueError as exc:
            if k == 0:
                continue
            raise DataError(f"{path}: row {lineno}: {exc}") from None
        if not math.isfinite(value):
            raise DataError(f"{path}: row {lineno}: non-finite value")
        out.append(value)
    return np.array(out, dtype=float)


def bin_events(event_times, range_, n_bins):
    """Count events in ``n_bins`` equal-width bins over ``range_ = (t0, t1)``.

    Returns a :class:`Dataset` with bin centres as t and counts as y.
    """
    if int(n_bins) != n_bins or n_bins <= 0:
        raise DataError(f"n_bins must be a positive integer, got {n_bins!r}")
    t0, t1 = map(float, range_)
    if not t0 < t1:
        raise DataError(f"empty range [{t0}, {t1}]")
    events = np.asarray(event_times, dtype=float)
    outside = np.count_nonzero((events < t0) | (events > t1))
    if outside:
        raise DataError(f"{outside} events outside range [{t0}, {t1}]")
    edges = np.linspace(t0, t1, int(n_bins) + 1)
    counts, _ = np.histogram(events, bins=edges)
    centres = 0.5 * (edges[:-1] + edges[1:])
    return Dataset(centres, counts.astype(float), {
        "binning": {"range": [t0, t1], "n_bins": int(n_bins), "width": (t1 - t0) / n_bins},
        "n_events": int(events.size),
    })


def coal_events():
    """Dates (fractional years) of the 191 British coal-mine explosions, 1851-1962."""
    with resources.files("ssvi.datasets").joinpath("coal.csv").open("r", encoding="utf-8") as fh:
        next(fh)
        return np.array([float(line) for line in fh if line.strip()])


COAL_RANGE = (1851.0, 1963.0)
COAL_BINS = 200


def coal_dataset(n_bins=COAL_BINS):
    data = bin_events(coal_events(), COAL_RANGE, n_bins)
    data.meta["source"] = "coal"
    return data


def sinc_latent(t):
    """6 sin(pi t / 10) / (pi t / 10) + 1."""
    return 6.0 * np.sinc(np.asarray(t) / 10.0) + 1.0


SINC_RANGE = (-50.0, 50.0)


def synthetic_bernoulli(n, seed=0, t_range=SINC_RANGE):
    """Binary labels y = 1{f(t) + eps > 0}, eps ~ N(0, 1), on an even grid.

    Thresholding a unit Gaussian is the same as drawing y ~ Bern(Phi(f)).
    """
    rng = np.random.default_rng(seed)
    t = np.linspace(*t_range, int(n))
    y = (sinc_latent(t) + rng.standard_normal(t.size) > 0).astype(float)
    return Dataset(t, y, {"source": f"synthetic:bernoulli(seed={seed})"})


def sample_prior(kernel, t, rng):
    """Draw f(t) from the GP prior by simulating its state-space model."""
    model = to_state_space(kernel)
    tr = discretize_grid(model, t)
    roots = []
    for Q in tr.Q:
        w, V = np.linalg.eigh(Q)
        roots.append(V * np.sqrt(np.clip(w, 0.0, None)))
    w, V = np.linalg.eigh(model.Pinf)
    x = (V * np.sqrt(np.clip(w, 0.0, None))) @ rng.standard_normal(model.d)
    f = np.empty(len(t))
    for i, k in enumerate(tr.index):
        x = tr.A[k] @ x + roots[k] @ rng.standard_normal(model.d)
        f[i] = model.h @ x
    return f


def synthetic_gaussian(n, seed=0, kernel=None, noise_variance=0.1, t_range=(0.0, 100.0)):
    kernel = kernel or Matern52(1.0, 2.0)
    rng = np.random.default_rng(seed)
    t = np.linspace(*t_range, int(n))
    f = sample_prior(kernel, t, rng)
    y = f + math.sqrt(noise_variance) * rng.standard_normal(t.size)
    return Dataset(t, y, {"source": f"synthetic:gaussian(seed={seed})"})


GENERATORS = {"bernoulli": synthetic_bernoulli, "gaussian": synthetic_gaussian}
