"""Command-line entry point ``rem``.

Exit codes: 0 success, 1 user error (bad input, mismatched specification),
2 numerical failure.  Every global flag can also be set through an
environment variable ``REM_<FLAG>`` (``REM_SEED``, ``REM_FORMAT``, ...); a
flag given on the command line wins over the environment, which wins over
the config file.

JSON outputs carry a ``meta`` block with the tool version and a hash of the
effective configuration and contain no timestamps, so identical inputs give
byte-identical files.  Wall-clock measurements are written to separate
``timings.json`` files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .baseline import compare, fit_exact_stream, run_stream, snapshots_at
from .core import (
    ActorTable, read_attributes_csv, read_clustered_events_csv, read_events_csv,
    validate_sequence, write_events_csv,
)
from .errors import NumericalError, RemError, UserError
from .estimate import FitOptions, fit_rem
from .gibbs import GibbsConfig, gibbs_mixed
from .multilevel import (
    ClusterFit, ClusterFits, fit_random_effects_freq, shrinkage_report,
)
from .simulate import (
    SimDesign, cluster_design, design_from_dict, simulate_clusters,
    simulate_sequence, stream_design,
)
from .stats import Statistics, parse_specs, spec_hash
from .stream import (
    GaussianPrior, checkpoint, ingest_batch, init_stream, restore,
)

log = logging.getLogger("remeta")

ENV_PREFIX = "REM_"
GLOBAL_FLAGS = ("config", "seed", "threads", "out", "format")

_SPEC_ITEM = {
    "oneOf": [
        {"type": "string"},
        {"type": "object", "additionalProperties": False, "required": ["kind"],
         "properties": {"kind": {"type": "string"},
                        "args": {"type": "array"},
                        "scaling": {"enum": ["raw", "standardized"]},
                        "name": {"type": "string"}}},
    ]
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["temporal", "ordinal"]},
        "statistics": {"type": "array", "items": _SPEC_ITEM, "minItems": 1},
        "n_actors": {"type": "integer", "minimum": 2},
        "fixed": {"type": "array", "items": {"type": "string"}},
        "seed": {"type": "integer", "minimum": 0},
        "format": {"enum": ["json", "table"]},
        "stream": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["frequentist", "bayesian"]},
                "min_batch": {"type": "integer", "minimum": 1},
                "carry_history": {"type": "boolean"},
                "prior": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"mean": {"type": "array", "items": {"type": "number"}},
                                   "covariance": {"type": "array"},
                                   "variance": {"type": "number", "exclusiveMinimum": 0}},
                },
            },
        },
        "multilevel": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "method": {"enum": ["freq", "gibbs"]},
                "marginal_weights": {"type": "boolean"},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_sweeps": {"type": "integer", "minimum": 1},
                "gibbs": {
                    "type": "object", "additionalProperties": False,
                    "properties": {
                        "eta": {"type": "number", "exclusiveMinimum": 0},
                        "d": {"oneOf": [{"type": "number"},
                                        {"type": "array", "items": {"type": "number"}}]},
                        "iterations": {"type": "integer", "minimum": 2},
                        "burn_in": {"type": "integer", "minimum": 0},
                        "thin": {"type": "integer", "minimum": 1},
                        "chains": {"type": "integer", "minimum": 1},
                        "interweave": {"type": "boolean"},
                    },
                },
            },
        },
        "fit": {
            "type": "object", "additionalProperties": False,
            "properties": {"max_iter": {"type": "integer", "minimum": 1},
                           "gtol": {"type": "number", "exclusiveMinimum": 0},
                           "terminal": {"type": "boolean"}},
        },
    },
}

DEFAULT_STATISTICS = ["intercept", "inertia", "reciprocity"]


class _Parser(argparse.ArgumentParser):
    # usage errors are user errors (exit 1), not argparse's default 2
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


# -- configuration -----------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UserError(f"config {path} is not valid JSON: {exc}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "top level"
        raise UserError(f"config error at {where}: {exc.message}") from None


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class Context:
    """Effective settings for one invocation."""

    def __init__(self, args):
        self.args = args
        self.config = load_config(args.config)
        if args.seed is not None:
            self.config["seed"] = int(args.seed)
        if args.format is not None:
            self.config["format"] = args.format
        self.format = self.config.get("format", "json")
        self.seed = self.config.get("seed")
        self.threads = max(1, int(args.threads)) if args.threads else (os.cpu_count() or 1)
        self.out = Path(args.out) if args.out else None
        self.hash = config_hash(self.config)

    @property
    def kind(self) -> str:
        return self.config.get("kind", "temporal")

    @property
    def specs(self):
        return parse_specs(self.config.get("statistics", DEFAULT_STATISTICS))

    @property
    def fit_options(self) -> FitOptions:
        return FitOptions(**self.config.get("fit", {}))

    def section(self, name) -> dict:
        return dict(self.config.get(name, {}))

    def meta(self, command: str) -> dict:
        return {"tool": "remeta", "version": __version__, "config_hash": self.hash,
                "command": command}

    def map(self, fn, items):
        """Ordered map; results do not depend on the thread count."""
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))


def apply_env(args, environ=None) -> None:
    environ = os.environ if environ is None else environ
    for flag in GLOBAL_FLAGS:
        if getattr(args, flag, None) is None:
            val = environ.get(ENV_PREFIX + flag.upper())
            if val not in (None, ""):
                setattr(args, flag, val)
    if args.format is not None and args.format not in ("json", "table"):
        raise UserError(f"--format must be json or table, got {args.format!r}")
    for flag in ("seed", "threads"):
        val = getattr(args, flag)
        if val is not None:
            try:
                setattr(args, flag, int(val))
            except ValueError:
                raise UserError(f"--{flag} must be an integer, got {val!r}") from None


# -- output helpers ----------------------------------------------------------

def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def coefficient_table(names, est, se, z=1.96, title=None) -> str:
    """Aligned table: estimate, 95% interval, interval width."""
    est = np.asarray(est, float)
    se = np.asarray(se, float)
    w = max([len("effect")] + [len(n) for n in names])
    head = f"{'effect':<{w}}  {'estimate':>10}  {'95% interval':>23}  {'width':>9}"
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for n, b, s in zip(names, est, se):
        lo, hi = b - z * s, b + z * s
        lines.append(f"{n:<{w}}  {b:10.4f}  [{lo:10.4f}, {hi:10.4f}]  {hi - lo:9.4f}")
    return "\n".join(lines) + "\n"


def emit(ctx: Context, doc: dict, table: str, default_name: str | None = None) -> None:
    text = dumps(doc) if ctx.format == "json" else table
    if ctx.out is None:
        sys.stdout.write(text)
        return
    target = ctx.out / default_name if (ctx.out.is_dir() and default_name) else ctx.out
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text)


def _read_attrs(path, table: ActorTable):
    return read_attributes_csv(path, table) if path else None


# -- subcommands -------------------------------------------------------------

def cmd_validate(ctx, a) -> int:
    if a.events is None:
        if ctx.args.config is None:
            raise UserError("nothing to validate: give an events file or --config")
        print(f"config ok (hash {ctx.hash})")
        return 0
    seq, _ = read_events_csv(a.events, a.n_actors or ctx.config.get("n_actors"))
    report = validate_sequence(seq)
    doc = {"meta": ctx.meta("validate"), "file": str(a.events), "n_events": len(seq),
           "n_actors": seq.n_actors, "ok": report.ok, "problems": list(report.violations)}
    table = (f"{a.events}: {len(seq)} events, {seq.n_actors} actors, "
             + ("ok\n" if report.ok else "problems:\n" + "\n".join(
                 f"  {p}" for p in report.violations) + "\n"))
    emit(ctx, doc, table)
    return 0 if report.ok else 1


def _design_from_args(ctx, a):
    if a.design:
        try:
            d = json.loads(Path(a.design).read_text())
        except OSError as exc:
            raise UserError(f"cannot read design {a.design}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UserError(f"design {a.design} is not valid JSON: {exc}") from None
        design = design_from_dict(d)
    elif a.preset == "stream":
        design = stream_design()
    elif a.preset == "clusters":
        design = cluster_design()
    else:
        raise UserError("give --design FILE or --preset {stream,clusters}")
    if ctx.seed is not None:
        design.seed = int(ctx.seed)
    return design


def cmd_simulate(ctx, a) -> int:
    design = _design_from_args(ctx, a)
    if ctx.out is None:
        raise UserError("simulate needs --out DIR")
    out = ctx.out
    out.mkdir(parents=True, exist_ok=True)
    meta = ctx.meta("simulate")
    if isinstance(design, SimDesign):
        seq = simulate_sequence(design)
        write_events_csv(out / "events.csv", seq)
        truth = {"meta": meta, "design": design.to_dict(), "names": design.names,
                 "beta_true": design.beta_true.tolist(), "n_events": len(seq)}
        files = ["events.csv"]
    else:
        sim = simulate_clusters(design)
        files = []
        for k, seq in enumerate(sim.sequences):
            name = f"cluster_{k:03d}.csv"
            write_events_csv(out / name, seq)
            files.append(name)
        # one long file with a cluster column for `rem multilevel fit`
        with open(out / "clusters.csv", "w", newline="") as fh:
            fh.write("time,sender,receiver,cluster\n")
            for k, seq in enumerate(sim.sequences):
                for t, s, r in zip(seq.times, seq.senders, seq.receivers):
                    fh.write(f"{float(t)!r},{int(s)},{int(r)},{k}\n")
        files.append("clusters.csv")
        truth = {"meta": meta, "design": design.to_dict(), **sim.truth}
    (out / "truth.json").write_text(dumps(truth))
    print(f"wrote {', '.join(files)} and truth.json to {out}")
    return 0


def _fit_doc(fit, meta):
    return {"meta": meta, "fit": fit.to_dict(), "se": fit.se.tolist()}


def cmd_fit(ctx, a) -> int:
    seq, table = read_events_csv(a.events, a.n_actors or ctx.config.get("n_actors"))
    attrs = _read_attrs(a.attributes, table)
    fit = fit_rem(seq, ctx.specs, attrs, ctx.kind, ctx.fit_options)
    doc = _fit_doc(fit, ctx.meta("fit"))
    title = (f"{len(seq)} events, {seq.n_actors} actors, log-likelihood {fit.loglik:.4f}"
             + ("" if fit.converged else f"  (NOT CONVERGED: {fit.message})"))
    emit(ctx, doc, coefficient_table(fit.names, fit.beta, fit.se, title=title), "fit.json")
    return 0 if fit.converged else 2


def _stream_prior(ctx, P):
    sec = ctx.section("stream")
    prior = sec.get("prior")
    if sec.get("mode", "frequentist") != "bayesian":
        if prior:
            raise UserError("stream.prior is only used with mode 'bayesian'")
        return None
    if not prior:
        return GaussianPrior.flat(P)
    if "variance" in prior:
        mean = np.asarray(prior.get("mean", np.zeros(P)), float)
        return GaussianPrior(mean, prior["variance"] * np.eye(P))
    return GaussianPrior(np.asarray(prior["mean"], float), np.asarray(prior["covariance"], float))


def _stream_n_actors(ctx, a):
    n = a.n_actors or ctx.config.get("n_actors")
    if n is None:
        raise UserError("the stream needs the actor count: set n_actors in the config "
                        "or pass --n-actors")
    return int(n)


def cmd_stream(ctx, a) -> int:
    specs = ctx.specs
    if a.action == "init":
        n = _stream_n_actors(ctx, a)
        stats = Statistics(specs, n)
        mode = ctx.section("stream").get("mode", "frequentist")
        state = init_stream(mode, stats.n_columns, _stream_prior(ctx, stats.n_columns),
                            spec_hash(stats.specs, ctx.kind), stats.names, a.onset)
        size = checkpoint(state, a.state)
        print(f"initialized {mode} stream with {stats.n_columns} coefficients "
              f"({size} bytes) at {a.state}")
        return 0
    n = _stream_n_actors(ctx, a) if a.action == "push" else None
    # status/export without a config just read the checkpoint
    check = a.action == "push" or ctx.args.config is not None
    expected = spec_hash(Statistics(specs, n or 2).specs, ctx.kind) if check else None
    state = restore(a.state, expected)
    if a.action == "push":
        if not a.events:
            raise UserError("stream push needs an events file")
        seq, _ = read_events_csv(a.events, n)
        if len(seq) < ctx.section("stream").get("min_batch", 1):
            raise UserError(f"batch has {len(seq)} events, below stream.min_batch")
        state, fit = ingest_batch(state, seq, specs, None, ctx.kind, options=ctx.fit_options)
        target = ctx.out or Path(a.state)
        checkpoint(state, target)
        print(f"pooled batch {state.batches_seen} ({len(seq)} events); "
              f"frontier now {state.last_time!r}; checkpoint {target}")
        return 0
    doc = {"meta": ctx.meta(f"stream {a.action}"), "mode": state.mode,
           "batches_seen": state.batches_seen, "n_events": state.n_events,
           "last_time": state.last_time, "spec_hash": state.spec_hash, "names": state.names,
           "mean": state.mean.tolist(), "se": state.se.tolist()}
    if a.action == "export":
        lo, hi = state.interval()
        doc.update(covariance=state.covariance.tolist(), lower=lo.tolist(), upper=hi.tolist())
    title = (f"{state.mode} stream: {state.batches_seen} batches, {state.n_events} events, "
             f"frontier {state.last_time!r}")
    emit(ctx, doc, coefficient_table(state.names, state.mean, state.se, title=title),
         f"stream_{a.action}.json")
    return 0


def _load_cluster_fits(path) -> list[ClusterFit]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UserError(f"cannot read cluster fits {path}: {exc}") from None
    items = doc["clusters"] if isinstance(doc, dict) else doc
    return [ClusterFit.from_dict(d) for d in items]


def _fit_clusters_threaded(ctx, seqs, specs, fixed) -> ClusterFits:
    """Per-cluster fits in parallel; same exclusion rules as ``fit_clusters``."""
    specs = parse_specs(specs)
    P = len(specs)

    def one(item):
        cid, seq = item
        if len(seq) < P:
            return cid, None, f"{len(seq)} events for {P} parameters"
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fit = fit_rem(seq, specs, None, ctx.kind, ctx.fit_options)
        except NumericalError as exc:
            return cid, None, str(exc)
        if not fit.converged:
            return cid, None, fit.message
        if fit.dropped:
            return cid, None, f"constant columns {fit.dropped}"
        return cid, ClusterFit.from_fit(fit, cid, fixed), ""

    out, excluded = [], {}
    for cid, fit, why in ctx.map(one, seqs.items()):
        if fit is None:
            excluded[cid] = why
            log.warning("cluster %s excluded: %s", cid, why)
        else:
            out.append(fit)
    if len(out) < 2:
        raise UserError(f"only {len(out)} cluster(s) could be fitted; need at least 2")
    return ClusterFits(out, excluded)


def cmd_multilevel(ctx, a) -> int:
    sec = ctx.section("multilevel")
    method = a.method or sec.get("method", "freq")
    marginal = a.marginal_weights or sec.get("marginal_weights", False)
    fixed = ctx.config.get("fixed", [])
    if a.fits:
        fits = _load_cluster_fits(a.fits)
        excluded = {}
    else:
        if not a.events:
            raise UserError("multilevel fit needs a clustered events CSV or --fits FILE")
        groups = read_clustered_events_csv(a.events)
        seqs = {c: s for c, (s, _) in sorted(groups.items(), key=lambda kv: _cluster_key(kv[0]))}
        fits = _fit_clusters_threaded(ctx, seqs, ctx.specs, fixed)
        excluded = fits.excluded
    meta = ctx.meta(f"multilevel fit --method {method}")
    if method == "freq":
        est = fit_random_effects_freq(fits, sec.get("tol", 1e-8), sec.get("max_sweeps", 10_000),
                                      marginal_weights=marginal)
        rep = shrinkage_report(fits, est)
        doc = {"meta": meta, "estimate": est.to_dict(), "excluded": excluded,
               "shrinkage": [list(r) for r in rep.rows()]}
        title = (f"{len(fits)} clusters, {est.sweeps} sweeps, "
                 + ("converged" if est.converged else "NOT CONVERGED")
                 + (", Sigma on the boundary" if est.boundary else ""))
        table = coefficient_table(est.names, est.mu, est.mu_se, title=title)
        emit(ctx, doc, table, "multilevel.json")
        return 0 if est.converged else 2
    gcfg = dict(sec.get("gibbs", {}))
    if ctx.seed is not None:
        gcfg["seed"] = int(ctx.seed)
    cfg = GibbsConfig(**gcfg)
    chain = gibbs_mixed(fits, cfg)
    summ = chain.summary()
    if a.draws:
        chain.write_draws(a.draws)
    doc = {"meta": meta, "config": {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray)
                                        else v) for k, v in vars(cfg).items()},
           "excluded": excluded, "summary": summ}
    labels = [f"psi[{n}]" for n in chain.fixed_names] + [f"mu[{n}]" for n in chain.names]
    rhat = max(v["rhat"] for v in summ.values())
    lines = [f"{len(fits)} clusters, {cfg.chains} chains x {chain.mu.shape[1]} draws, "
             f"max R-hat {rhat:.4f}"]
    head = f"{'parameter':<28} {'mean':>10} {'2.5%':>10} {'97.5%':>10} {'width':>9}"
    lines += [head, "-" * len(head)]
    for lab in labels:
        r = summ[lab]
        lines.append(f"{lab:<28} {r['mean']:10.4f} {r['q2.5']:10.4f} {r['q97.5']:10.4f} "
                     f"{r['q97.5'] - r['q2.5']:9.4f}")
    emit(ctx, doc, "\n".join(lines) + "\n", "multilevel.json")
    return 0


def _cluster_key(c):
    return (0, int(c), "") if str(c).isdigit() else (1, 0, str(c))


def cmd_compare(ctx, a) -> int:
    design = _design_from_args(ctx, a)
    if not isinstance(design, SimDesign):
        raise UserError("compare needs a single-sequence design")
    try:
        sizes = sorted({int(x) for x in a.batch_sizes.split(",") if x.strip()})
    except ValueError:
        raise UserError(f"bad --batch-sizes {a.batch_sizes!r}") from None
    if not sizes or sizes[0] < 1:
        raise UserError("batch sizes must be positive integers")
    if ctx.out is None:
        raise UserError("compare needs --out DIR")
    out = ctx.out
    out.mkdir(parents=True, exist_ok=True)
    seq = simulate_sequence(design)
    M = len(seq)
    step = a.exact_step or max(sizes)
    grid = list(range(step, M + 1, step))
    if not grid or grid[-1] != M:
        grid.append(M)
    sec = ctx.section("stream")
    carry = sec.get("carry_history", False)
    mode = sec.get("mode", "frequentist")
    exact = fit_exact_stream(seq, grid, design.specs, design.attrs, ctx.kind, ctx.fit_options,
                             repeats=a.repeats)
    meta = ctx.meta("compare")
    timings = {"exact_seconds": dict(zip(grid, exact.wall_times)),
               "exact_peak_bytes": dict(zip(grid, exact.peak_memory))}
    summary = {"meta": meta, "design": design.to_dict(), "boundaries": grid,
               "carry_history": carry, "reports": {}}
    for b in sizes:
        runner = run_stream(seq, design.specs, b, design.attrs, ctx.kind, mode, carry,
                            ctx.fit_options)
        counts = [n for n, _ in runner.snapshots]
        common = [g for g in grid if g in counts]
        sub = _subseries(exact, common)
        rep = compare(sub, snapshots_at(runner, common))
        body = rep.to_dict()
        for key in ("exact_times", "pooled_times", "exact_memory", "pooled_memory"):
            body.pop(key)
        summary["reports"][str(b)] = body
        timings[f"batch_{b}_seconds"] = [r.fit_time + r.update_time for r in runner.records]
        with open(out / f"trace_batch_{b}.csv", "w", newline="") as fh:
            fh.write("events,effect,exact,pooled,exact_se,pooled_se\n")
            for row in rep.trace_rows():
                fh.write(",".join([str(row[0]), row[1]] + [repr(float(x)) for x in row[2:]])
                         + "\n")
        (out / f"report_batch_{b}.txt").write_text(
            f"batch size {b}\n" + rep.table() + "\n")
        print(f"batch {b}: {len(runner.records)} batches, flagged at the end: "
              f"{', '.join(rep.flagged()) or 'none'}")
    (out / "comparison.json").write_text(dumps(summary))
    (out / "timings.json").write_text(dumps({"meta": meta, **_jsonable(timings)}))
    print(f"wrote comparison.json, timings.json and trace CSVs to {out}")
    return 0


def _subseries(exact, boundaries):
    from .baseline import ExactSeries
    idx = [exact.boundaries.index(b) for b in boundaries]
    return ExactSeries([exact.boundaries[i] for i in idx], [exact.fits[i] for i in idx],
                       [exact.wall_times[i] for i in idx], [exact.peak_memory[i] for i in idx],
                       exact.spec_hash)


def _jsonable(d):
    return {str(k): (_jsonable(v) if isinstance(v, dict) else v) for k, v in d.items()}


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def flags(default):
        # subcommand copies use SUPPRESS so they do not clobber flags given earlier
        par = _Parser(add_help=False)
        g = par.add_argument_group("global options")
        g.add_argument("--config", default=default, help="JSON model configuration")
        g.add_argument("--seed", default=default, help="random seed (overrides the config)")
        g.add_argument("--threads", default=default, help="worker threads (default: all cores)")
        g.add_argument("--out", default=default, help="output file or directory")
        g.add_argument("--format", default=default, help="json (default) or table")
        g.add_argument("-v", "--verbose", action="store_true",
                       default=False if default is None else default,
                       help="log progress to stderr")
        return par

    top, common = flags(None), flags(argparse.SUPPRESS)

    p = _Parser(prog="rem", description="Relational event models for streams and "
                "multilevel data via meta-analytic pooling.", parents=[top])
    p.add_argument("--version", action="version", version=f"rem {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("validate", parents=[common], help="check an events CSV or a config")
    s.add_argument("events", nargs="?")
    s.add_argument("--n-actors", type=int)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("simulate", parents=[common], help="simulate from a design")
    s.add_argument("--design")
    s.add_argument("--preset", choices=["stream", "clusters"])
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", parents=[common], help="fit one event sequence")
    s.add_argument("events")
    s.add_argument("--attributes")
    s.add_argument("--n-actors", type=int)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("stream", parents=[common], help="fixed-effect stream pooling")
    s.add_argument("action", choices=["init", "push", "status", "export"])
    s.add_argument("state", help="checkpoint file")
    s.add_argument("events", nargs="?", help="batch CSV (push only)")
    s.add_argument("--n-actors", type=int)
    s.add_argument("--onset", type=float, default=0.0, help="stream start time (init only)")
    s.set_defaults(func=cmd_stream)

    s = sub.add_parser("multilevel", parents=[common], help="random/mixed-effects pooling")
    s.add_argument("action", choices=["fit"])
    s.add_argument("events", nargs="?", help="CSV with a cluster column")
    s.add_argument("--fits", help="JSON list of per-cluster estimates instead of events")
    s.add_argument("--method", choices=["freq", "gibbs"])
    s.add_argument("--marginal-weights", action="store_true",
                   help="GLS weights (omega_k + Sigma)^-1 in the mu update")
    s.add_argument("--draws", help="write posterior draws to this CSV (gibbs)")
    s.set_defaults(func=cmd_multilevel)

    s = sub.add_parser("compare", parents=[common], help="stream pooling vs exact refits")
    s.add_argument("--design")
    s.add_argument("--preset", choices=["stream"])
    s.add_argument("--batch-sizes", default="50,200,500")
    s.add_argument("--exact-step", type=int, default=None,
                   help="refit the exact model every this many events (default: largest batch)")
    s.add_argument("--repeats", type=int, default=1, help="timing repeats per exact refit")
    s.set_defaults(func=cmd_compare)
    return p


def run(argv=None, environ=None) -> int:
    """Parse ``argv`` and execute; returns the exit code."""
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        apply_env(args, environ)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        logging.captureWarnings(True)
        ctx = Context(args)
        return args.func(ctx, args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except (UserError, RemError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
