"""Temporal and ordinal REM log-likelihoods and the Poisson-regression form.

A :class:`Design` bundles everything a likelihood needs: per-event covariate
slices, the observed dyad of each event and the waiting times.  Evaluation
walks the design in fixed-size event chunks and accumulates in a fixed order,
so results do not depend on how the design is stored.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .core import EventSequence, RiskSet
from .errors import RateOverflowError, UserError
from .stats import HistoryState, Statistics, history_after

MAX_EXPONENT = 700.0
CHUNK_EVENTS = 256


@dataclass(frozen=True)
class LogLikEval:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray


class Design:
    """Base class; subclasses provide :meth:`chunks` and the terminal slice."""

    names: list[str]
    risk: RiskSet
    observed: np.ndarray
    dt: np.ndarray
    dt_end: float
    intercept: int | None = None  # column index of the intercept, if any

    @property
    def has_intercept(self) -> bool:
        return self.intercept is not None

    @property
    def n_events(self) -> int:
        return len(self.observed)

    @property
    def n_dyads(self) -> int:
        return len(self.risk)

    @property
    def n_columns(self) -> int:
        return len(self.names)

    def chunks(self, size: int = CHUNK_EVENTS) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(first_event_index, X)`` with ``X`` of shape (m, D, P)."""
        raise NotImplementedError

    def terminal_slice(self) -> np.ndarray | None:
        raise NotImplementedError

    def select(self, columns) -> "Design":
        return _ColumnView(self, list(columns))


class ArrayDesign(Design):
    """Design held in memory as an (M, D, P) array."""

    def __init__(self, X, observed, dt, names, risk: RiskSet, X_end=None, dt_end=0.0,
                 intercept=None):
        self.X = np.asarray(X, float)
        self.observed = np.asarray(observed, np.int64)
        self.dt = np.asarray(dt, float)
        self.names = list(names)
        self.risk = risk
        self.X_end = None if X_end is None else np.asarray(X_end, float)
        self.dt_end = float(dt_end)
        self.intercept = intercept
        if self.X.ndim != 3 or self.X.shape[:2] != (len(self.observed), len(risk)):
            raise UserError(f"design shape {self.X.shape} does not match "
                            f"{len(self.observed)} events x {len(risk)} dyads")

    def chunks(self, size=CHUNK_EVENTS):
        for start in range(0, self.n_events, size):
            yield start, self.X[start:start + size]

    def terminal_slice(self):
        return self.X_end

    @property
    def nbytes(self) -> int:
        return self.X.nbytes


class StreamedDesign(Design):
    """Design recomputed from the raw sequence on every pass.

    Memory stays at O(chunk * D * P) regardless of sequence length, at the
    cost of recomputing the statistics for each likelihood evaluation.
    """

    def __init__(self, seq: EventSequence, stats: Statistics, history: HistoryState | None = None):
        self.seq = seq
        self.stats = stats
        self.history = history
        self.names = list(stats.names)
        self.risk = stats.risk
        self.observed = self.risk.index(seq.senders, seq.receivers).astype(np.int64) \
            if len(seq) else np.zeros(0, np.int64)
        self.dt = seq.inter_event_times
        self.dt_end = float(seq.end_time - (seq.times[-1] if len(seq) else seq.onset))
        self.intercept = next((j for j, s in enumerate(stats.specs) if s.kind == "intercept"),
                              None)
        self._X_end = None

    def chunks(self, size=CHUNK_EVENTS):
        state = HistoryState(self.seq.n_actors) if self.history is None else self.history.copy()
        D, P = self.n_dyads, self.n_columns
        buf = np.empty((size, D, P))
        start = 0
        k = 0
        for s, r in zip(self.seq.senders, self.seq.receivers):
            buf[k] = self.stats.compute(state)
            state.update(s, r)
            k += 1
            if k == size:
                yield start, buf
                start += k
                k = 0
        if k:
            yield start, buf[:k]
        self._X_end = self.stats.compute(state)

    def terminal_slice(self):
        if self._X_end is None:
            self._X_end = self.stats.compute(history_after(self.seq, self.history))
        return self._X_end


class _ColumnView(Design):
    def __init__(self, base: Design, columns):
        self.base = base
        self.columns = columns
        self.names = [base.names[j] for j in columns]
        self.risk = base.risk
        self.observed = base.observed
        self.dt = base.dt
        self.dt_end = base.dt_end
        self.intercept = columns.index(base.intercept) if base.intercept in columns else None

    def chunks(self, size=CHUNK_EVENTS):
        for start, X in self.base.chunks(size):
            yield start, X[:, :, self.columns]

    def terminal_slice(self):
        X = self.base.terminal_slice()
        return None if X is None else X[:, self.columns]


def make_design(seq: EventSequence, specs, attrs=None, *, materialize=True,
                history: HistoryState | None = None) -> Design:
    """Assemble the design for ``seq``; validates the sequence first."""
    seq.check()
    stats = specs if isinstance(specs, Statistics) else Statistics(specs, seq.n_actors, attrs)
    streamed = StreamedDesign(seq, stats, history)
    if not materialize:
        return streamed
    X = np.empty((len(seq), streamed.n_dyads, streamed.n_columns))
    for start, chunk in streamed.chunks():
        X[start:start + len(chunk)] = chunk
    return ArrayDesign(X, streamed.observed, streamed.dt, streamed.names, streamed.risk,
                       streamed.terminal_slice(), streamed.dt_end, streamed.intercept)


def design_from_slices(seq: EventSequence, slices: Iterable, names=None,
                       terminal=None, intercept=None) -> ArrayDesign:
    """Design from precomputed :class:`~remeta.stats.CovariateSlice` objects."""
    mats = [getattr(s, "matrix", s) for s in slices]
    risk = RiskSet(seq.n_actors)
    X = np.stack(mats) if mats else np.zeros((0, len(risk), 0 if names is None else len(names)))
    if names is None:
        names = [f"x{j + 1}" for j in range(X.shape[2])]
    observed = risk.index(seq.senders, seq.receivers) if len(seq) else np.zeros(0, int)
    dt_end = float(seq.end_time - (seq.times[-1] if len(seq) else seq.onset))
    return ArrayDesign(X, observed, seq.inter_event_times, names, risk, terminal, dt_end,
                       intercept)


def _check_rates(eta, design: Design, start):
    bad = np.abs(eta) > MAX_EXPONENT
    if bad.any():
        m, d = np.argwhere(bad)[0]
        s, r = design.risk.dyad(int(d))
        raise RateOverflowError(
            f"rate overflow at event {start + m} for dyad ({s}, {r}): "
            f"log-rate {eta[m, d]:.4g} exceeds +/-{MAX_EXPONENT:g}")


def loglik_temporal(design: Design, beta, terminal: bool = True) -> LogLikEval:
    """Log-likelihood of exact event times with piecewise-constant rates.

    Sums ``x'_obs beta - dt * sum_d exp(x'_d beta)`` over events and, when
    ``terminal`` is true and the window extends past the last event, the
    survival of all dyads over ``end_time - t_M``.
    """
    beta = np.asarray(beta, float)
    P = len(beta)
    if P != design.n_columns:
        raise UserError(f"beta has length {P}, design has {design.n_columns} columns")
    value = 0.0
    grad = np.zeros(P)
    hess = np.zeros((P, P))
    obs, dt = design.observed, design.dt
    for start, X in design.chunks():
        m = len(X)
        eta = X @ beta
        _check_rates(eta, design, start)
        lam = np.exp(eta)
        idx = np.arange(m)
        o = obs[start:start + m]
        w = lam * dt[start:start + m, None]
        value += eta[idx, o].sum() - w.sum()
        grad += X[idx, o].sum(axis=0)
        Xf = X.reshape(-1, P)
        wf = w.reshape(-1)
        grad -= wf @ Xf
        hess -= Xf.T @ (Xf * wf[:, None])
    if terminal and design.dt_end > 0:
        Xe = design.terminal_slice()
        eta = Xe @ beta
        _check_rates(eta[None, :], design, design.n_events)
        w = np.exp(eta) * design.dt_end
        value -= w.sum()
        grad -= w @ Xe
        hess -= Xe.T @ (Xe * w[:, None])
    return LogLikEval(float(value), grad, hess)


def loglik_ordinal(design: Design, beta) -> LogLikEval:
    """Log-likelihood of the event order only (multinomial logit per event)."""
    if design.has_intercept:
        raise UserError("intercept unidentified in ordinal model")
    beta = np.asarray(beta, float)
    P = len(beta)
    if P != design.n_columns:
        raise UserError(f"beta has length {P}, design has {design.n_columns} columns")
    value = 0.0
    grad = np.zeros(P)
    hess = np.zeros((P, P))
    obs = design.observed
    for start, X in design.chunks():
        m = len(X)
        eta = X @ beta
        top = eta.max(axis=1, keepdims=True)
        p = np.exp(eta - top)
        z = p.sum(axis=1, keepdims=True)
        p /= z
        lse = top[:, 0] + np.log(z[:, 0])
        idx = np.arange(m)
        o = obs[start:start + m]
        value += (eta[idx, o] - lse).sum()
        xbar = np.einsum("md,mdp->mp", p, X)
        grad += (X[idx, o] - xbar).sum(axis=0)
        Xf = X.reshape(-1, P)
        hess -= Xf.T @ (Xf * p.reshape(-1, 1)) - xbar.T @ xbar
    return LogLikEval(float(value), grad, hess)


def within_event_variation(design: Design) -> np.ndarray:
    """Per-column max over events of the across-dyad variance."""
    out = np.zeros(design.n_columns)
    for _, X in design.chunks():
        if len(X):
            out = np.maximum(out, X.var(axis=1).max(axis=0))
    return out


def loglik(design: Design, beta, kind: str = "temporal", terminal: bool = True) -> LogLikEval:
    if kind == "temporal":
        return loglik_temporal(design, beta, terminal=terminal)
    if kind == "ordinal":
        return loglik_ordinal(design, beta)
    raise UserError(f"unknown model kind {kind!r}")


# -- Poisson form --------------------------------------------------------------

class PoissonRow(NamedTuple):
    event: int  # M for the terminal rows
    dyad: int
    y: int
    offset: float
    covariates: np.ndarray


def poisson_expand(design: Design, terminal: bool = True) -> Iterator[PoissonRow]:
    """Stream the Poisson-regression rows equivalent to the temporal REM.

    One row per (event, dyad) with offset ``log(dt_m)`` and ``y = 1`` for the
    observed dyad; D extra ``y = 0`` rows carry the terminal survival term.
    """
    if np.any(design.dt <= 0):
        m = int(np.argmax(design.dt <= 0))
        raise UserError(f"zero or negative waiting time at event {m}; tied times must be "
                        f"resolved before expansion")
    obs = design.observed
    for start, X in design.chunks():
        for i in range(len(X)):
            m = start + i
            off = float(np.log(design.dt[m]))
            o = obs[m]
            for d in range(X.shape[1]):
                yield PoissonRow(m, d, int(d == o), off, X[i, d].copy())
    if terminal and design.dt_end > 0:
        Xe = design.terminal_slice()
        off = float(np.log(design.dt_end))
        for d in range(Xe.shape[0]):
            yield PoissonRow(design.n_events, d, 0, off, Xe[d].copy())


def poisson_loglik(rows: Iterable[PoissonRow], beta, block: int = 4096) -> LogLikEval:
    """Poisson log-likelihood over rows, dropping the beta-free ``y * offset`` term."""
    beta = np.asarray(beta, float)
    P = len(beta)
    value = 0.0
    grad = np.zeros(P)
    hess = np.zeros((P, P))

    def flush(ys, offs, xs):
        nonlocal value, grad, hess
        y = np.array(ys, float)
        X = np.array(xs).reshape(len(ys), P)
        lin = X @ beta
        mu = np.exp(np.array(offs) + lin)
        value += float(y @ lin - mu.sum())
        grad += (y - mu) @ X
        hess -= X.T @ (X * mu[:, None])

    ys, offs, xs = [], [], []
    for row in rows:
        ys.append(row.y)
        offs.append(row.offset)
        xs.append(row.covariates)
        if len(ys) == block:
            flush(ys, offs, xs)
            ys, offs, xs = [], [], []
    if ys:
        flush(ys, offs, xs)
    return LogLikEval(value, grad, hess)


def write_poisson_csv(rows: Iterable[PoissonRow], path, names) -> int:
    """Debug dump ``event,dyad,y,offset,x1..xP``; returns the row count."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["event", "dyad", "y", "offset", *names])
        for row in rows:
            w.writerow([row.event, row.dyad, row.y, repr(row.offset),
                        *(repr(float(v)) for v in row.covariates)])
            n += 1
    return n


def check_ordinal_curvature(design: Design, tol: float = 1e-12) -> list[str]:
    """Names of columns without within-event variation (flat in the ordinal model)."""
    var = within_event_variation(design)
    flat = [n for n, v in zip(design.names, var) if v <= tol]
    if flat:
        warnings.warn(f"columns without within-event variation have zero curvature in the "
                      f"ordinal likelihood: {flat}", RuntimeWarning, stacklevel=2)
    return flat

