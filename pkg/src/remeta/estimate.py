"""Newton-Raphson maximum likelihood for a single event sequence.

The result of a fit, ``(beta_hat, omega_hat)``, is the pseudo-data that every
pooling routine consumes.  Columns that carry no information in a given
sequence (constant over the whole design) are dropped from that fit and
reported with infinite variance, which gives them zero weight when pooled.
"""

from __future__ import annotations

import json
import logging
import time
import tracemalloc
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .core import EventSequence
from .errors import RankDeficientError, RateOverflowError, UserError
from .likelihood import Design, loglik, make_design
from .stats import Statistics, spec_hash

log = logging.getLogger(__name__)


@dataclass
class FitOptions:
    max_iter: int = 100
    max_halvings: int = 50
    gtol: float = 1e-8
    beta_bound: float = 1e4
    ridge: float = 1e-8
    terminal: bool = True
    materialize: bool = True
    drop_constant: bool = True


@dataclass
class FitResult:
    beta: np.ndarray
    omega: np.ndarray
    loglik: float
    n_events: int
    converged: bool
    iterations: int
    names: list[str]
    spec_hash: str = ""
    kind: str = "temporal"
    dropped: list[str] = field(default_factory=list)
    grad_norm: float = float("nan")
    message: str = ""

    @property
    def beta_hat(self):
        return self.beta

    @property
    def omega_hat(self):
        return self.omega

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.omega))

    @property
    def n_params(self) -> int:
        return len(self.beta)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "covariance": self.omega.tolist(),
            "loglik": self.loglik,
            "n_events": self.n_events,
            "converged": self.converged,
            "iterations": self.iterations,
            "names": list(self.names),
            "spec_hash": self.spec_hash,
            "kind": self.kind,
            "dropped": list(self.dropped),
            "grad_norm": self.grad_norm,
            "message": self.message,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "FitResult":
        return cls(np.array(d["beta"], float), np.array(d["covariance"], float), d["loglik"],
                   d["n_events"], d["converged"], d.get("iterations", 0), d["names"],
                   d.get("spec_hash", ""), d.get("kind", "temporal"), d.get("dropped", []),
                   d.get("grad_norm", float("nan")), d.get("message", ""))

    @classmethod
    def from_json(cls, text) -> "FitResult":
        return cls.from_dict(json.loads(text))


def _column_ranges(design: Design):
    lo = np.full(design.n_columns, np.inf)
    hi = np.full(design.n_columns, -np.inf)
    wvar = np.zeros(design.n_columns)
    for _, X in design.chunks():
        if len(X):
            lo = np.minimum(lo, X.min(axis=(0, 1)))
            hi = np.maximum(hi, X.max(axis=(0, 1)))
            wvar = np.maximum(wvar, X.var(axis=1).max(axis=0))
    return lo, hi, wvar


def degenerate_columns(design: Design, kind: str) -> list[int]:
    """Columns that cannot be estimated from this design."""
    lo, hi, wvar = _column_ranges(design)
    if kind == "ordinal":
        return [j for j in range(design.n_columns) if wvar[j] <= 1e-14]
    const = [j for j in range(design.n_columns) if hi[j] - lo[j] <= 1e-14 * max(1, abs(hi[j]))]
    # the first nonzero constant column acts as the intercept
    drop, kept_const = [], False
    for j in const:
        if hi[j] == 0.0 or kept_const:
            drop.append(j)
        else:
            kept_const = True
    if design.has_intercept:
        drop = [j for j in const if j != design.intercept]
    return drop


def _collinear_names(neg_hess, names):
    w, v = np.linalg.eigh(neg_hess)
    null = v[:, 0]
    idx = np.flatnonzero(np.abs(null) > 0.1)
    return [names[i] for i in idx]


def _rank_check(neg_hess, names):
    w = np.linalg.eigvalsh(neg_hess)
    if w[-1] <= 0 or w[0] <= 1e-12 * w[-1]:
        cols = _collinear_names(neg_hess, names)
        raise RankDeficientError(f"rank-deficient design: collinear columns {', '.join(cols)}")
    return w[-1]


def invert_information(neg_hess, names, ridge=1e-8):
    """Inverse of the observed information via Cholesky, one ridge retry."""
    try:
        c = linalg.cho_factor(neg_hess, lower=True)
    except linalg.LinAlgError:
        try:
            c = linalg.cho_factor(neg_hess + ridge * np.eye(len(neg_hess)), lower=True)
            log.warning("information matrix not positive definite; ridge %g applied", ridge)
        except linalg.LinAlgError:
            cols = _collinear_names(neg_hess, names)
            raise RankDeficientError(
                f"rank-deficient design: collinear columns {', '.join(cols)}") from None
    omega = linalg.cho_solve(c, np.eye(len(neg_hess)))
    return 0.5 * (omega + omega.T)


def _safe_eval(design, beta, kind, terminal):
    try:
        return loglik(design, beta, kind, terminal)
    except RateOverflowError:
        return None


def _intercept_start(design: Design, terminal: bool) -> float:
    """Intercept-only MLE, ``log(M / (D * exposure))``."""
    exposure = float(np.sum(design.dt)) + (design.dt_end if terminal else 0.0)
    if design.n_events == 0 or exposure <= 0:
        return 0.0
    return float(np.log(design.n_events / (design.n_dyads * exposure)))


def newton_raphson(design: Design, kind: str = "temporal", options: FitOptions | None = None,
                   start=None):
    """Maximise the log-likelihood; returns ``(beta, eval, iterations, converged, msg)``."""
    opt = options or FitOptions()
    P = design.n_columns
    if start is None:
        beta = np.zeros(P)
        if kind == "temporal" and design.has_intercept:
            beta[design.intercept] = _intercept_start(design, opt.terminal)
    else:
        beta = np.asarray(start, float).copy()
    ev = loglik(design, beta, kind, opt.terminal)
    scale = _rank_check(-ev.hessian, design.names) if P else 1.0
    it = 0
    while True:
        gnorm = float(np.max(np.abs(ev.gradient))) if P else 0.0
        if gnorm < opt.gtol:
            # a vanishing gradient with vanishing curvature is a separated column
            # running off to infinity, not an optimum
            if P and np.linalg.eigvalsh(-ev.hessian)[0] < 1e-7 * scale:
                cols = _collinear_names(-ev.hessian, design.names)
                return beta, ev, it, False, (f"divergence: information vanishes along "
                                             f"{', '.join(cols)} (possible separation)")
            return beta, ev, it, True, "converged"
        if it >= opt.max_iter:
            return beta, ev, it, False, f"no convergence after {it} iterations"
        try:
            c = linalg.cho_factor(-ev.hessian, lower=True)
            step = linalg.cho_solve(c, ev.gradient)
        except linalg.LinAlgError:
            step = np.linalg.lstsq(-ev.hessian, ev.gradient, rcond=None)[0]
        t = 1.0
        # near the optimum the log-likelihood is flat to round-off; a step that
        # loses only that much is still accepted
        slack = 1e-12 * max(1.0, abs(ev.value))
        for _ in range(opt.max_halvings + 1):
            cand = beta + t * step
            new = _safe_eval(design, cand, kind, opt.terminal)
            if new is not None and np.isfinite(new.value) and new.value >= ev.value - slack:
                break
            t *= 0.5
        else:
            return beta, ev, it, False, f"line search failed at iteration {it + 1} " \
                                        f"(gradient norm {gnorm:.3g})"
        beta, ev = cand, new
        it += 1
        if np.max(np.abs(beta)) > opt.beta_bound:
            j = int(np.argmax(np.abs(beta)))
            return beta, ev, it, False, (f"divergence: |beta| exceeds {opt.beta_bound:g} "
                                         f"for column {design.names[j]!r} (possible separation)")


def fit_design(design: Design, kind: str = "temporal", options: FitOptions | None = None,
               hash_: str = "") -> FitResult:
    opt = options or FitOptions()
    if kind not in ("temporal", "ordinal"):
        raise UserError(f"unknown model kind {kind!r}")
    if kind == "ordinal" and design.has_intercept:
        raise UserError("intercept unidentified in ordinal model")
    names = list(design.names)
    P = len(names)
    M = design.n_events
    if M < P:
        warnings.warn(f"{M} events for {P} parameters; estimates will be unreliable",
                      RuntimeWarning, stacklevel=2)
    drop = degenerate_columns(design, kind) if opt.drop_constant else []
    keep = [j for j in range(P) if j not in drop]
    sub = design.select(keep) if drop else design
    if drop:
        log.info("dropping constant columns %s", [names[j] for j in drop])

    beta_k, ev, it, converged, msg = newton_raphson(sub, kind, opt)
    beta = np.zeros(P)
    omega = np.zeros((P, P))
    beta[keep] = beta_k
    for j in drop:
        omega[j, j] = np.inf
    if converged:
        om = invert_information(-ev.hessian, sub.names, opt.ridge)
        omega[np.ix_(keep, keep)] = om
    else:
        omega[np.ix_(keep, keep)] = np.nan
    return FitResult(beta, omega, ev.value, M, converged, it, names, hash_, kind,
                     [names[j] for j in drop],
                     float(np.max(np.abs(ev.gradient))) if len(keep) else 0.0, msg)


def fit_rem(seq: EventSequence, specs, attrs=None, kind: str = "temporal",
            options: FitOptions | None = None, history=None) -> FitResult:
    """Fit one relational event model to ``seq`` by Newton-Raphson.

    Parameters
    ----------
    seq : EventSequence
    specs : list of StatisticSpec
    attrs : ActorAttributes, optional
    kind : {'temporal', 'ordinal'}
    options : FitOptions, optional
        Tolerances and the design storage mode (``materialize=False`` keeps
        memory at O(D*P) by recomputing statistics on every pass).
    history : HistoryState, optional
        Prior history for the statistics; empty by default.

    Returns
    -------
    FitResult
        ``converged`` is false on divergence or iteration exhaustion; a
        singular information matrix raises :class:`RankDeficientError`.
    """
    opt = options or FitOptions()
    stats = Statistics(specs, seq.n_actors, attrs)
    design = make_design(seq, stats, materialize=opt.materialize, history=history)
    return fit_design(design, kind, opt, spec_hash(stats.specs, kind))


@dataclass
class ProfileReport:
    wall_time: float
    peak_memory: int
    iterations: int
    fit: FitResult

    def to_dict(self):
        return {"wall_time": self.wall_time, "peak_memory": self.peak_memory,
                "iterations": self.iterations, "fit": self.fit.to_dict()}


def profile_fit(seq: EventSequence, specs, attrs=None, kind="temporal",
                options: FitOptions | None = None, history=None) -> ProfileReport:
    """Run :func:`fit_rem` under a wall clock and ``tracemalloc``."""
    started = tracemalloc.is_tracing()
    if not started:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base, _ = tracemalloc.get_traced_memory()
    t0 = time.perf_counter()
    try:
        fit = fit_rem(seq, specs, attrs, kind, options, history)
    finally:
        wall = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        if not started:
            tracemalloc.stop()
    return ProfileReport(wall, max(0, peak - base), fit.iterations, fit)

