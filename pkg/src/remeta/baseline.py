"""Exact refits on growing prefixes, for judging stream pooling.

The exact comparator refits the whole prefix at every batch boundary with
history statistics accumulated over the entire prefix.  Default stream
batches restart their history, so exact-vs-pooled differences mix the
pooling approximation with that change in the statistics.
"""

from __future__ import annotations

import json
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .core import EventSequence
from .errors import BudgetExceededError, SpecMismatchError, UserError
from .estimate import FitOptions, FitResult, fit_rem
from .stats import Statistics
from .stream import StreamRunner

DEFAULT_BUDGET = 2 * 1024 ** 3


def design_bytes(n_events: int, n_actors: int, n_columns: int) -> int:
    """Bytes needed to hold the materialized (M, D, P) float64 design."""
    return 8 * n_events * n_actors * (n_actors - 1) * n_columns


@dataclass
class ExactSeries:
    boundaries: list[int]
    fits: list[FitResult]
    wall_times: list[float]
    peak_memory: list[int]
    spec_hash: str = ""

    @property
    def names(self):
        return self.fits[0].names if self.fits else []


def fit_exact_stream(seq: EventSequence, boundaries, specs, attrs=None, kind: str = "temporal",
                     options: FitOptions | None = None, budget: int = DEFAULT_BUDGET,
                     track_memory: bool = True, repeats: int = 1) -> ExactSeries:
    """Refit the full prefix ``seq[:b]`` for every boundary ``b``.

    Parameters
    ----------
    boundaries : sequence of int
        Cumulative event counts, strictly increasing, at most ``len(seq)``.
    budget : int
        Refuse to start if the largest materialized design would exceed this
        many bytes.
    repeats : int
        Time each refit this many times and keep the fastest, which filters
        scheduler noise out of the timing trend.

    Raises
    ------
    BudgetExceededError
        Before any allocation when the memory estimate exceeds ``budget``.
    """
    opt = options or FitOptions()
    b = [int(x) for x in boundaries]
    if not b or any(x <= 0 for x in b) or any(y <= x for x, y in zip(b, b[1:])):
        raise UserError("boundaries must be positive and strictly increasing")
    if b[-1] > len(seq):
        raise UserError(f"boundary {b[-1]} beyond the {len(seq)} events in the sequence")
    P = Statistics(specs, seq.n_actors, attrs).n_columns
    need = design_bytes(b[-1], seq.n_actors, P) if opt.materialize else 0
    if need > budget:
        raise BudgetExceededError(
            f"cannot allocate: exact refit at {b[-1]} events needs about {need / 2**20:.0f} MiB "
            f"for the design, budget is {budget / 2**20:.0f} MiB")
    fits, walls, peaks = [], [], []
    for x in b:
        prefix = seq[:x]
        best = np.inf
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            fit = fit_rem(prefix, specs, attrs, kind, opt)
            best = min(best, time.perf_counter() - t0)
        walls.append(best)
        peak = 0
        if track_memory:
            # separate pass so tracing overhead stays out of the timings
            tracemalloc.start()
            fit_rem(prefix, specs, attrs, kind, opt)
            peak = tracemalloc.get_traced_memory()[1]
            tracemalloc.stop()
        peaks.append(peak)
        fits.append(fit)
    return ExactSeries(b, fits, walls, peaks, fits[0].spec_hash)


def run_stream(seq: EventSequence, specs, batch_size: int, attrs=None, kind: str = "temporal",
               mode: str = "frequentist", carry_history: bool = False,
               options: FitOptions | None = None, track_memory: bool = False) -> StreamRunner:
    """Feed ``seq`` to a :class:`~remeta.stream.StreamRunner` in fixed-size batches.

    A short final remainder is merged into the last batch rather than fitted
    on its own.
    """
    if batch_size < 1:
        raise UserError("batch size must be positive")
    runner = StreamRunner(specs, seq.n_actors, attrs, kind, mode, min_batch=batch_size,
                          carry_history=carry_history, options=options,
                          track_memory=track_memory)
    events = seq.events
    n_full = max(1, len(events) // batch_size)
    for i in range(n_full):
        stop = len(events) if i == n_full - 1 else (i + 1) * batch_size
        runner.push(events[i * batch_size:stop])
    runner.flush()
    return runner


def snapshots_at(runner: StreamRunner, boundaries):
    """Pooled snapshots at the requested event counts, in order."""
    by_count = dict(runner.snapshots)
    missing = [b for b in boundaries if b not in by_count]
    if missing:
        raise UserError(f"misaligned boundaries: no pooled snapshot at {missing}")
    return [(b, by_count[b]) for b in boundaries]


@dataclass
class ComparisonReport:
    names: list[str]
    boundaries: list[int]
    exact_beta: np.ndarray
    exact_se: np.ndarray
    pooled_beta: np.ndarray
    pooled_se: np.ndarray
    exact_times: list[float] = field(default_factory=list)
    pooled_times: list[float] = field(default_factory=list)
    exact_memory: list[int] = field(default_factory=list)
    pooled_memory: list[int] = field(default_factory=list)
    spec_hash: str = ""
    threshold: float = 2.0

    @property
    def difference(self) -> np.ndarray:
        return self.pooled_beta - self.exact_beta

    @property
    def relative_difference(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.difference / np.abs(self.exact_beta)

    @property
    def exact_width(self) -> np.ndarray:
        return 2 * 1.96 * self.exact_se

    @property
    def pooled_width(self) -> np.ndarray:
        return 2 * 1.96 * self.pooled_se

    @property
    def flags(self) -> np.ndarray:
        """True where ``|pooled - exact|`` exceeds ``threshold`` pooled SEs."""
        with np.errstate(invalid="ignore"):
            return np.abs(self.difference) > self.threshold * self.pooled_se

    def flagged(self, step: int = -1) -> list[str]:
        return [n for n, f in zip(self.names, self.flags[step]) if f]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names), "boundaries": list(self.boundaries),
            "exact_beta": self.exact_beta.tolist(), "exact_se": self.exact_se.tolist(),
            "pooled_beta": self.pooled_beta.tolist(), "pooled_se": self.pooled_se.tolist(),
            "exact_times": list(self.exact_times), "pooled_times": list(self.pooled_times),
            "exact_memory": list(self.exact_memory), "pooled_memory": list(self.pooled_memory),
            "spec_hash": self.spec_hash, "threshold": self.threshold,
            "flags": self.flags.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "ComparisonReport":
        arr = {k: np.array(d[k], float) for k in
               ("exact_beta", "exact_se", "pooled_beta", "pooled_se")}
        return cls(list(d["names"]), [int(x) for x in d["boundaries"]], **arr,
                   exact_times=list(d.get("exact_times", [])),
                   pooled_times=list(d.get("pooled_times", [])),
                   exact_memory=list(d.get("exact_memory", [])),
                   pooled_memory=list(d.get("pooled_memory", [])),
                   spec_hash=d.get("spec_hash", ""), threshold=d.get("threshold", 2.0))

    @classmethod
    def from_json(cls, text) -> "ComparisonReport":
        return cls.from_dict(json.loads(text))

    def trace_rows(self):
        """Long-format rows ``(boundary, effect, exact, pooled, exact_se, pooled_se)``."""
        for i, b in enumerate(self.boundaries):
            for j, n in enumerate(self.names):
                yield (b, n, self.exact_beta[i, j], self.pooled_beta[i, j],
                       self.exact_se[i, j], self.pooled_se[i, j])

    def table(self, step: int = -1) -> str:
        head = f"{'effect':<36} {'exact':>9} {'pooled':>9} {'diff':>9} {'pooled SE':>9}  flag"
        lines = [f"events: {self.boundaries[step]}", head, "-" * len(head)]
        for j, n in enumerate(self.names):
            lines.append(f"{n:<36} {self.exact_beta[step, j]:9.4f} "
                         f"{self.pooled_beta[step, j]:9.4f} {self.difference[step, j]:9.4f} "
                         f"{self.pooled_se[step, j]:9.4f}  {'*' if self.flags[step, j] else ''}")
        return "\n".join(lines)


def compare(exact: ExactSeries, pooled, pooled_times=None, pooled_memory=None,
            threshold: float = 2.0) -> ComparisonReport:
    """Line up exact refits with pooled snapshots at the same boundaries.

    Parameters
    ----------
    exact : ExactSeries
    pooled : list of (int, PooledState)
        Snapshots as recorded by :class:`~remeta.stream.StreamRunner`.
    """
    pooled = list(pooled)
    b_pool = [int(n) for n, _ in pooled]
    if b_pool != list(exact.boundaries):
        raise UserError(f"misaligned boundaries: exact {list(exact.boundaries)} vs "
                        f"pooled {b_pool}")
    hashes = {s.spec_hash for _, s in pooled} | {exact.spec_hash}
    hashes.discard("")
    if len(hashes) > 1:
        raise SpecMismatchError(f"exact and pooled paths used different specs: {sorted(hashes)}")
    eb = np.array([f.beta for f in exact.fits])
    es = np.array([f.se for f in exact.fits])
    pb = np.array([s.mean for _, s in pooled])
    ps = np.array([s.se for _, s in pooled])
    return ComparisonReport(list(exact.names), list(exact.boundaries), eb, es, pb, ps,
                            list(exact.wall_times), list(pooled_times or []),
                            list(exact.peak_memory), list(pooled_memory or []),
                            next(iter(hashes), ""), threshold)
