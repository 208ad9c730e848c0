"""Fixed-effect pooling of batch fits from a relational event stream.

Each batch of events is fitted on its own and the resulting
``(beta_hat, omega_hat)`` pair is folded into a running inverse-variance
summary.  The summary is O(P^2) regardless of how many events have been seen,
so it can be checkpointed and resumed without touching past data.

Two algebraically equivalent paths are provided: :func:`update_stream` folds
one batch at a time from the previous pooled mean and covariance, and
:func:`pool_noniterative` sums the batch precisions directly.  The Bayesian
mode starts from a Gaussian prior and treats each posterior as the next prior.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from . import __version__
from .core import EventSequence
from .errors import CheckpointError, FrontierError, NumericalError, SpecMismatchError, UserError
from .estimate import FitOptions, FitResult, fit_rem
from .stats import HistoryState, Statistics, history_after, spec_hash

log = logging.getLogger(__name__)

MODES = ("frequentist", "bayesian")
FLAT_PRIOR_VARIANCE = 1e6
CHECKPOINT_FORMAT = "remeta-stream"
CHECKPOINT_VERSION = 1


@dataclass
class GaussianPrior:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, float).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, float))
        P = len(self.mean)
        if self.covariance.shape != (P, P):
            raise UserError(f"prior covariance must be {P}x{P}, got {self.covariance.shape}")
        if not np.allclose(self.covariance, self.covariance.T):
            raise UserError("prior covariance is not symmetric")
        try:
            linalg.cholesky(self.covariance, lower=True)
        except linalg.LinAlgError:
            raise UserError("prior covariance is not positive definite") from None

    @classmethod
    def flat(cls, P, variance=FLAT_PRIOR_VARIANCE) -> "GaussianPrior":
        """Zero mean with ``variance * I``: the noninformative default."""
        return cls(np.zeros(P), variance * np.eye(P))

    @property
    def precision(self) -> np.ndarray:
        return _spd_inverse(self.covariance, "prior covariance")


@dataclass
class PooledState:
    mode: str
    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    weighted_sum: np.ndarray
    batches_seen: int = 0
    last_time: float = 0.0
    spec_hash: str = ""
    names: list[str] = field(default_factory=list)
    n_events: int = 0

    @property
    def n_params(self) -> int:
        return len(self.mean)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def interval(self, z=1.96):
        """Normal interval ``mean +/- z * se``."""
        return self.mean - z * self.se, self.mean + z * self.se

    def copy(self) -> "PooledState":
        return PooledState(self.mode, self.mean.copy(), self.covariance.copy(),
                           self.precision.copy(), self.weighted_sum.copy(), self.batches_seen,
                           self.last_time, self.spec_hash, list(self.names), self.n_events)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "precision": self.precision.tolist(),
            "weighted_sum": self.weighted_sum.tolist(),
            "batches_seen": self.batches_seen,
            "last_time": self.last_time,
            "spec_hash": self.spec_hash,
            "names": list(self.names),
            "n_events": self.n_events,
        }

    @classmethod
    def from_dict(cls, d) -> "PooledState":
        P = len(d["mean"])
        return cls(d["mode"], np.array(d["mean"], float),
                   np.array(d["covariance"], float).reshape(P, P),
                   np.array(d["precision"], float).reshape(P, P),
                   np.array(d["weighted_sum"], float), int(d["batches_seen"]),
                   float(d["last_time"]), d["spec_hash"], list(d.get("names", [])),
                   int(d.get("n_events", 0)))


def _spd_inverse(A, what):
    try:
        c = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        raise NumericalError(f"{what} is not positive definite") from None
    inv = linalg.cho_solve(c, np.eye(len(A)))
    return 0.5 * (inv + inv.T)


def fit_precision(fit: FitResult):
    """``(omega^-1, omega^-1 beta)`` of one fit.

    Columns dropped from the fit carry infinite variance and contribute zero
    precision.
    """
    if not fit.converged:
        raise UserError(f"cannot pool a non-converged fit ({fit.message})")
    omega = np.asarray(fit.omega, float)
    P = len(fit.beta)
    keep = np.flatnonzero(np.isfinite(np.diag(omega)))
    prec = np.zeros((P, P))
    if len(keep):
        sub = omega[np.ix_(keep, keep)]
        if not np.all(np.isfinite(sub)):
            raise NumericalError("batch covariance has non-finite entries")
        prec[np.ix_(keep, keep)] = _spd_inverse(sub, "batch covariance")
    return prec, prec @ np.where(np.isfinite(fit.beta), fit.beta, 0.0)


def _moments(precision, weighted_sum):
    """Covariance and mean from the natural parameters.

    Directions with zero accumulated precision get infinite variance and a
    zero mean.
    """
    P = len(weighted_sum)
    keep = np.flatnonzero(np.diag(precision) > 0)
    cov = np.zeros((P, P))
    np.fill_diagonal(cov, np.inf)
    mean = np.zeros(P)
    if len(keep):
        sub = _spd_inverse(precision[np.ix_(keep, keep)], "pooled precision")
        cov[np.ix_(keep, keep)] = sub
        mean[keep] = sub @ weighted_sum[keep]
    return mean, cov


def init_stream(mode: str = "frequentist", P: int = 1, prior: GaussianPrior | None = None,
                spec_hash: str = "", names=None, onset: float = 0.0) -> PooledState:
    """Empty pooled state.

    Parameters
    ----------
    mode : {'frequentist', 'bayesian'}
    P : int
        Number of coefficients.
    prior : GaussianPrior, optional
        Bayesian mode only; defaults to :meth:`GaussianPrior.flat`.
    onset : float
        Time at which the stream starts; the first batch's first waiting
        time is measured from here.
    """
    if mode not in MODES:
        raise UserError(f"unknown pooling mode {mode!r}; expected one of {MODES}")
    names = list(names) if names is not None else []
    if mode == "frequentist":
        if prior is not None:
            raise UserError("a prior is only used in bayesian mode")
        Z = np.zeros((P, P))
        return PooledState(mode, np.zeros(P), np.diag(np.full(P, np.inf)), Z, np.zeros(P),
                           0, float(onset), spec_hash, names)
    prior = prior or GaussianPrior.flat(P)
    if len(prior.mean) != P:
        raise UserError(f"prior has {len(prior.mean)} coefficients, expected {P}")
    prec = prior.precision
    return PooledState(mode, prior.mean.copy(), prior.covariance.copy(), prec,
                       prec @ prior.mean, 0, float(onset), spec_hash, names)


def _check_fit(state: PooledState, fit: FitResult):
    if state.spec_hash and fit.spec_hash and fit.spec_hash != state.spec_hash:
        raise SpecMismatchError(
            f"fit spec hash {fit.spec_hash} does not match stream {state.spec_hash}")
    if len(fit.beta) != state.n_params:
        raise SpecMismatchError(
            f"fit has {len(fit.beta)} coefficients, stream has {state.n_params}")


def update_stream(state: PooledState, fit: FitResult) -> PooledState:
    """Fold one batch fit into the pooled state.

    The new covariance is ``(omega_hat^-1 + omega_tilde^-1)^-1`` and the new
    mean is ``omega_new (omega_hat^-1 beta_hat + omega_tilde^-1 beta_tilde)``,
    computed from the previous pooled mean rather than from running sums.  A
    frequentist stream takes its first batch as is.  Returns a new state.
    """
    _check_fit(state, fit)
    prec_b, info_b = fit_precision(fit)
    new = state.copy()
    new.spec_hash = state.spec_hash or fit.spec_hash
    if not new.names:
        new.names = list(fit.names)
    if state.mode == "frequentist" and state.batches_seen == 0:
        new.precision = prec_b
        new.weighted_sum = info_b
        new.mean = np.where(np.isfinite(np.diag(fit.omega)), fit.beta, 0.0).astype(float)
        new.covariance = np.array(fit.omega, float, copy=True)
    else:
        prec = state.precision + prec_b
        new.precision = 0.5 * (prec + prec.T)
        new.weighted_sum = info_b + state.precision @ state.mean
        new.mean, new.covariance = _moments(new.precision, new.weighted_sum)
    new.batches_seen = state.batches_seen + 1
    new.n_events = state.n_events + fit.n_events
    return new


def pool_noniterative(fits, prior: GaussianPrior | None = None, mode: str | None = None,
                      ) -> PooledState:
    """Pool all fits at once from the summed precisions.

    With a prior (or ``mode='bayesian'``, which implies the flat prior) the
    prior precision and prior information enter the sums once.
    """
    fits = list(fits)
    if not fits:
        raise UserError("need at least one fit to pool")
    mode = mode or ("bayesian" if prior is not None else "frequentist")
    P = len(fits[0].beta)
    hashes = {f.spec_hash for f in fits if f.spec_hash}
    if len(hashes) > 1:
        raise SpecMismatchError(f"fits come from different specifications: {sorted(hashes)}")
    if any(len(f.beta) != P for f in fits):
        raise SpecMismatchError("fits have different numbers of coefficients")
    prec = np.zeros((P, P))
    info = np.zeros(P)
    if mode == "bayesian":
        prior = prior or GaussianPrior.flat(P)
        prec += prior.precision
        info += prior.precision @ prior.mean
    for f in fits:
        p, i = fit_precision(f)
        prec += p
        info += i
    prec = 0.5 * (prec + prec.T)
    mean, cov = _moments(prec, info)
    return PooledState(mode, mean, cov, prec, info, len(fits), 0.0,
                       next(iter(hashes), ""), list(fits[0].names),
                       sum(f.n_events for f in fits))


def _as_sequence(events, n_actors) -> EventSequence:
    if isinstance(events, EventSequence):
        return events
    return EventSequence.from_events(events, n_actors)


def _batch_window(state: PooledState, seq: EventSequence) -> EventSequence:
    if len(seq) == 0:
        raise UserError("empty batch")
    if seq.times[0] <= state.last_time:
        raise FrontierError(f"batch precedes stream frontier: first event at {float(seq.times[0])!r}, "
                            f"frontier at {state.last_time!r}")
    return seq.with_window(onset=state.last_time, end_time=float(seq.times[-1]))


def ingest_batch(state: PooledState, raw_events, specs, attrs=None, kind: str = "temporal",
                 n_actors: int | None = None, options: FitOptions | None = None,
                 history: HistoryState | None = None):
    """Fit one batch and pool it.

    The batch's waiting-time clock starts at ``state.last_time`` (onset
    correction) and its statistics start from ``history`` (empty unless
    carried over).

    Returns
    -------
    (PooledState, FitResult)
    """
    if isinstance(raw_events, EventSequence):
        n_actors = raw_events.n_actors
    elif n_actors is None:
        raise UserError("n_actors is required for raw event lists")
    seq = _as_sequence(raw_events, n_actors)
    seq = _batch_window(state, seq)
    h = spec_hash(Statistics(specs, seq.n_actors, attrs).specs, kind)
    if state.spec_hash and h != state.spec_hash:
        raise SpecMismatchError(f"batch spec hash {h} does not match stream {state.spec_hash}")
    fit = fit_rem(seq, specs, attrs, kind, options, history)
    new = update_stream(state, fit)
    new.last_time = float(seq.times[-1])
    return new, fit


@dataclass
class BatchRecord:
    index: int
    n_events: int
    fit_time: float
    update_time: float
    update_peak: int
    converged: bool
    skipped: str = ""


class StreamRunner:
    """Algorithm-level driver: buffer, fit, pool.

    Batches smaller than ``min_batch`` are held back and merged with the next
    push.  With ``carry_history=True`` the statistics of each batch start from
    the full history of earlier batches instead of an empty one.
    """

    def __init__(self, specs, n_actors, attrs=None, kind="temporal", mode="frequentist",
                 prior: GaussianPrior | None = None, min_batch: int = 30,
                 carry_history: bool = False, options: FitOptions | None = None,
                 state: PooledState | None = None, track_memory: bool = False):
        stats = Statistics(specs, n_actors, attrs)
        self.specs = stats.specs
        self.n_actors = n_actors
        self.attrs = attrs
        self.kind = kind
        self.min_batch = int(min_batch)
        self.carry_history = carry_history
        self.options = options
        self.track_memory = track_memory
        h = spec_hash(self.specs, kind)
        if state is None:
            state = init_stream(mode, stats.n_columns, prior, h, stats.names)
        elif state.spec_hash != h:
            raise SpecMismatchError(f"state spec hash {state.spec_hash} does not match {h}")
        self.state = state
        self.history = HistoryState(n_actors) if carry_history else None
        self._buffer: list = []
        self.records: list[BatchRecord] = []
        self.fits: list[FitResult] = []
        # (events seen so far, pooled state after that batch)
        self.snapshots: list[tuple[int, PooledState]] = []
        self.events_seen = 0

    @property
    def buffered(self) -> int:
        return len(self._buffer)

    def push(self, events) -> FitResult | None:
        """Add events; fit and pool once at least ``min_batch`` are buffered."""
        if isinstance(events, EventSequence):
            events = events.events
        self._buffer.extend(tuple(e) for e in events)
        if len(self._buffer) < self.min_batch:
            log.info("buffering %d events (minimum batch %d)", len(self._buffer), self.min_batch)
            return None
        return self.flush()

    def flush(self) -> FitResult | None:
        if not self._buffer:
            return None
        seq = EventSequence.from_events(self._buffer, self.n_actors)
        window = _batch_window(self.state, seq)
        # the batch fit is timed separately from the O(P^3) pooling step
        t0 = time.perf_counter()
        try:
            fit = fit_rem(window, self.specs, self.attrs, self.kind, self.options, self.history)
        except NumericalError as exc:
            fit = None
            reason = str(exc)
        else:
            reason = "" if fit.converged else fit.message
        t1 = time.perf_counter()
        peak = 0
        if reason:
            log.warning("batch ending at %g not pooled: %s", seq.times[-1], reason)
            new = self.state.copy()
            t2 = t3 = t1
        else:
            if self.track_memory:
                tracemalloc.start()
            t2 = time.perf_counter()
            new = update_stream(self.state, fit)
            t3 = time.perf_counter()
            if self.track_memory:
                peak = tracemalloc.get_traced_memory()[1]
                tracemalloc.stop()
            self.fits.append(fit)
        new.last_time = float(seq.times[-1])
        self.state = new
        self.events_seen += len(seq)
        self.snapshots.append((self.events_seen, new))
        if self.carry_history:
            self.history = history_after(seq, self.history)
        self.records.append(BatchRecord(len(self.records) + 1, len(seq), t1 - t0, t3 - t2, peak,
                                        not reason, reason))
        self._buffer = []
        return fit


def _checksum(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def checkpoint(state: PooledState, path) -> int:
    """Write ``state`` to ``path`` as JSON; returns the file size in bytes."""
    payload = state.to_dict()
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "package_version": __version__, "checksum": _checksum(payload), "state": payload}
    text = json.dumps(doc, sort_keys=True, indent=1)
    Path(path).write_text(text)
    return len(text.encode())


def restore(path, expected_hash: str | None = None) -> PooledState:
    """Read a checkpoint, refusing corrupt files and foreign specifications."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a stream checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    payload = doc.get("state")
    if not isinstance(payload, dict) or _checksum(payload) != doc.get("checksum"):
        raise CheckpointError(f"checkpoint {path} is corrupt (checksum mismatch)")
    state = PooledState.from_dict(payload)
    if expected_hash is not None and state.spec_hash != expected_hash:
        raise SpecMismatchError(
            f"checkpoint spec hash {state.spec_hash} does not match {expected_hash}")
    return state
