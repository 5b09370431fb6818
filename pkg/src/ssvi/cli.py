"""Command-line interface: ``ssvi fit | predict | bench | bin``.

Set ``SSVI_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) to control logging.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import resource
import statistics
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .config import load_config
from .data import COAL_BINS, GENERATORS, bin_events, coal_dataset, coal_events, ingest_csv, read_events
from .errors import ConfigError, DataError, NumericalError, UnsupportedKernelError
from .inference import SequentialEngine, SiteIterator, make_engine
from .kernels import Matern52, format_kernel, parse_kernel
from .learning import FitConfig, fit
from .likelihoods import LIKELIHOODS, gh_rule
from .objectives import evaluate_objective
from .prediction import predict_latent
from .sites import SiteParams

log = logging.getLogger("ssvi")

Z95 = 1.959964
BENCH_REPEATS = 5
LOG_ENV = "SSVI_LOG_LEVEL"


# --- output helpers -------------------------------------------------------------


def _fmt(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in zip(*columns):
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, columns):
    _atomic_write(path, csv_text(header, columns))


def write_json(path, obj):
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_csv_columns(path):
    """Header and float columns of a CSV written by :func:`write_csv`."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = np.array([[float(x) for x in row] for row in body]).reshape(len(body), len(header))
    return header, {name: cols[:, j] for j, name in enumerate(header)}


# --- data -----------------------------------------------------------------------


def load_dataset(cfg):
    d = cfg.data
    if cfg.synthetic is not None:
        gen = GENERATORS[cfg.synthetic["generator"]]
        return gen(cfg.synthetic.get("n", 1000), seed=cfg.seed)
    if d.get("builtin") == "coal":
        if "range" in d:
            return bin_events(coal_events(), d["range"], d.get("bins", COAL_BINS))
        return coal_dataset(d.get("bins", COAL_BINS))
    if "path" in d:
        unit = d.get("time_unit", "raw")
        if d.get("format", "series") == "events":
            return bin_events(read_events(d["path"], unit), d["range"], d["bins"])
        return ingest_csv(d["path"], unit)
    raise ConfigError("no data source: set data.path, data.builtin or a [synthetic] section")


# --- subcommands -----------------------------------------------------------------


def _final_objective(objective, kernel, lik, t, y, sites, engine, rule, dense_cap):
    return float(evaluate_objective(objective, make_engine(engine, kernel, t, dense_cap), lik, y, sites, rule))


def run_fit(cfg, data):
    """Fit the configured model on ``data``; returns (FitResult, metrics)."""
    if len(data) == 0:
        raise DataError("no data")
    start = time.perf_counter()
    result = fit(cfg.kernel, cfg.likelihood, data.t, data.y, cfg.learning)
    wall = time.perf_counter() - start
    rule = gh_rule(cfg.quad_order)
    final = _final_objective(cfg.learning.objective, result.kernel, result.lik, data.t,
                             cfg.likelihood.check_support(data.y), result.sites, cfg.engine, rule, cfg.dense_cap)
    metrics = {
        "final_objective": final,
        "objective": cfg.learning.objective,
        "iters": cfg.learning.outer_iters,
        "inner_iters": cfg.learning.inner_iters,
        "n": len(data),
        "engine": cfg.engine,
        "mode": cfg.inference.mode,
        "hyperparameters": dict(zip(result.theta.names, map(float, result.theta.constrained))),
        "ep_skipped": int(result.skipped),
        "wall_time_s": wall,
    }
    return result, metrics


def cmd_fit(args):
    cfg = load_config(args.config)
    if args.engine:
        cfg.engine = cfg.learning.engine = args.engine
    if args.output:
        cfg.output_dir = Path(args.output)
    data = load_dataset(cfg)
    log.info("fitting n=%d with %s engine", len(data), cfg.engine)
    result, metrics = run_fit(cfg, data)
    out = cfg.output_dir
    marg = result.posterior.marginals
    sd = np.sqrt(marg.v)
    write_csv(out / "posterior.csv", ["t", "mean", "var", "lower95", "upper95"],
              [data.t, marg.m, marg.v, marg.m - Z95 * sd, marg.m + Z95 * sd])
    write_csv(out / "sites.csv", ["t", "lambda1", "lambda2"], [data.t, result.sites.lambda1, result.sites.lambda2])
    tr = result.trace
    write_csv(out / "trace.csv", ["iter", "objective", "grad_norm", "elapsed_s"],
              [[r["iter"] for r in tr], [r["objective"] for r in tr], [r["grad_norm"] for r in tr],
               [r["elapsed_s"] for r in tr]])
    write_json(out / "model.json", {
        "kernel": format_kernel(result.kernel),
        "likelihood": {"name": result.lik.name, **dataclasses.asdict(result.lik)},
        "quad_order": cfg.quad_order,
        "t": data.t.tolist(),
        "y": data.y.tolist(),
        "lambda1": result.sites.lambda1.tolist(),
        "lambda2": result.sites.lambda2.tolist(),
    })
    write_json(out / "metrics.json", metrics)
    print(f"final {metrics['objective']} {metrics['final_objective']:.6f} "
          f"({metrics['iters']} iterations, {metrics['wall_time_s']:.2f} s); wrote {out}")
    return 0


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    kernel = parse_kernel(doc["kernel"])
    lik_args = dict(doc["likelihood"])
    lik = LIKELIHOODS[lik_args.pop("name")](**lik_args)
    sites = SiteParams(np.array(doc["lambda1"]), np.array(doc["lambda2"]))
    return kernel, lik, np.array(doc["t"], dtype=float), np.array(doc["y"], dtype=float), sites, doc["quad_order"]


def _read_test(path):
    """t* (and optional y*) from a one- or two-column CSV with optional header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows:
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]
    width = {len(r) for r in rows}
    if len(width) > 1 or (width and width.pop() not in (1, 2)):
        raise DataError(f"{path}: expected one (t) or two (t, y) columns")
    try:
        vals = np.array([[float(c) for c in r] for r in rows], dtype=float).reshape(len(rows), -1)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(vals)):
        raise DataError(f"{path}: row {int(np.flatnonzero(~np.isfinite(vals).all(axis=1))[0]) + 1}: non-finite value")
    t_star = vals[:, 0] if len(rows) else np.zeros(0)
    y_star = vals[:, 1] if vals.shape[1:] == (2,) else None
    return t_star, y_star


def predict(kernel, lik, t, sites, t_star, y_star=None, quad_order=None):
    """Predictive marginals of f at ``t_star`` and per-point NLPD if ``y_star`` is given."""
    engine = SequentialEngine(kernel, t)
    post = engine.posterior(sites)
    marg = predict_latent(engine.model, t, post.filter, post.smoother, t_star)
    nlpd = None
    if y_star is not None:
        y_star = lik.check_support(y_star)
        value, _, _ = lik.log_partition(y_star, marg.m, marg.v, gh_rule(quad_order or 20))
        nlpd = -np.asarray(value)
    return marg, nlpd


def cmd_predict(args):
    cfg = load_config(args.config)
    model_path = Path(args.model) if args.model else cfg.output_dir / "model.json"
    try:
        kernel, lik, t, _, sites, order = load_model(model_path)
    except OSError as exc:
        raise DataError(f"cannot read fitted model {model_path}: {exc.strerror}; run 'ssvi fit' first") from None
    t_star, y_star = _read_test(args.test)
    marg, nlpd = predict(kernel, lik, t, sites, t_star, y_star, order)
    header, cols = ["t", "mean", "var"], [t_star, marg.m, marg.v]
    if nlpd is not None:
        header += ["y", "nlpd"]
        cols += [y_star, nlpd]
    text = csv_text(header, cols)
    if args.output:
        _atomic_write(args.output, text)
        if nlpd is not None:
            print(f"mean NLPD {float(np.mean(nlpd)):.6f} over {len(nlpd)} points; wrote {args.output}")
    else:
        sys.stdout.write(text)
    return 0


def _parse_sizes(text):
    try:
        sizes = [int(float(s)) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes must be comma-separated numbers, got {text!r}") from None
    if not sizes or min(sizes) <= 0:
        raise ConfigError("--sizes must list positive sizes")
    return sizes


def _warmup(cfg):
    """Compile the JIT kernels outside the timed region."""
    t = np.linspace(0.0, 1.0, 8)
    y = np.ones(8)
    fit(Matern52(1.0, 1.0), cfg.likelihood, t, y, FitConfig(outer_iters=1, inference=cfg.inference))


def bench_size(cfg, data, engine, repeats=BENCH_REPEATS):
    """(setup_s, per_iter_s) medians over ``repeats`` runs for one engine."""
    y = cfg.likelihood.check_support(data.y)
    fc = FitConfig(**{**cfg.learning.__dict__, "outer_iters": 1, "engine": engine})
    setups, iters = [], []
    for _ in range(repeats):
        start = time.perf_counter()
        eng = make_engine(engine, cfg.kernel, data.t, cfg.dense_cap)
        it = SiteIterator(cfg.likelihood, y, cfg.inference)
        eng.posterior(it.initial_sites(eng))
        setups.append(time.perf_counter() - start)
        result = fit(cfg.kernel, cfg.likelihood, data.t, y, fc)
        iters.append(result.trace[0]["elapsed_s"])
    return statistics.median(setups), statistics.median(iters)


def cmd_bench(args):
    cfg = load_config(args.config)
    if cfg.synthetic is None:
        raise ConfigError("bench needs a [synthetic] section (generator) in the config")
    sizes = _parse_sizes(args.sizes)
    _warmup(cfg)
    gen = GENERATORS[cfg.synthetic["generator"]]
    rows = []
    for n in sizes:
        data = gen(n, seed=cfg.seed)
        engines = ["sequential"] + (["dense"] if n <= cfg.dense_cap else [])
        for engine in engines:
            setup, per_iter = bench_size(cfg, data, engine, args.repeats)
            peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
            rows.append((n, engine, setup, per_iter, peak))
            log.info("n=%d %s setup %.4fs per-iter %.4fs", n, engine, setup, per_iter)
    cols = list(zip(*rows)) if rows else [[]] * 5
    text = csv_text(["n", "engine", "setup_s", "per_iter_s", "peak_mem_estimate"],
                    cols)
    if args.output:
        _atomic_write(args.output, text)
    else:
        sys.stdout.write(text)
    return 0


def _parse_range(text):
    try:
        a, b = (float(s) for s in text.split(","))
    except ValueError:
        raise ConfigError(f"--range must be 'a,b', got {text!r}") from None
    return a, b


def cmd_bin(args):
    events = read_events(args.input, args.time_unit)
    data = bin_events(events, _parse_range(args.range), args.bins)
    text = csv_text(["t", "y"], [data.t, data.y])
    if args.output:
        _atomic_write(args.output, text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ssvi", description="Linear-time variational inference for 1-D GP models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and write posterior, sites, trace and metrics")
    p.add_argument("config", help="path to the run config")
    p.add_argument("--engine", choices=["sequential", "dense"], help="override the configured engine")
    p.add_argument("--output", help="override output.dir")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict latent marginals (and NLPD) at test inputs")
    p.add_argument("config", help="config used for the fit")
    p.add_argument("--test", required=True, help="CSV of t* (and optionally y*)")
    p.add_argument("--model", help="fitted model.json (default: <output.dir>/model.json)")
    p.add_argument("--output", "-o", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="time setup and one outer iteration over sizes")
    p.add_argument("config", help="config with a [synthetic] section")
    p.add_argument("--sizes", default="1e2,1e3,1e4", help="comma-separated sizes, e.g. 1e2,1e3,1e4")
    p.add_argument("--repeats", type=int, default=BENCH_REPEATS, help="runs per size (median reported)")
    p.add_argument("--output", "-o", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("bin", help="bin event times into counts")
    p.add_argument("--input", required=True, help="CSV of event times")
    p.add_argument("--bins", type=int, required=True, help="number of equal-width bins")
    p.add_argument("--range", required=True, help="t0,t1")
    p.add_argument("--time-unit", default="raw", choices=["raw", "years", "days"])
    p.add_argument("--output", "-o", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_bin)
    return parser


def main(argv=None):
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, NumericalError, UnsupportedKernelError, ValueError, OSError) as exc:
        print(f"ssvi {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
