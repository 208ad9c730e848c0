"""Endogenous and exogenous predictors for every dyad at every event.

Statistic definitions (counts are of strictly earlier events, ``h`` ranges
over third actors):

===================  =======================================================
inertia(s, r)        count(s->r)
reciprocity(s, r)    count(r->s)
indegree_sender      events received by s (``indegree_receiver``: by r)
outdegree_sender     events sent by s (``outdegree_receiver``: by r)
otp(s, r)            sum_h min(count(s->h), count(h->r))
itp(s, r)            sum_h min(count(h->s), count(r->h))
osp(s, r)            sum_h min(count(s->h), count(r->h))
isp(s, r)            sum_h min(count(h->s), count(h->r))
ps_AB_*              turn-taking indicators relative to the previous event A->B
rrank_send(s, r)     1 / rank of r among s's receivers, most recent first
rrank_receive(s, r)  1 / rank of r among the actors who sent to s
===================  =======================================================

The shared-partner and two-path matrices are maintained incrementally in
O(N) per event; :func:`compute_slice` only reads them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .core import ActorAttributes, Event, EventSequence, RiskSet
from .errors import UserError

SIMPLE_KINDS = (
    "intercept", "inertia", "reciprocity",
    "indegree_sender", "indegree_receiver", "outdegree_sender", "outdegree_receiver",
    "otp", "itp", "osp", "isp",
    "ps_AB_BA", "ps_AB_BY", "ps_AB_XA", "ps_AB_XB", "ps_AB_XY", "ps_AB_AY",
    "rrank_send", "rrank_receive",
)
ATTRIBUTE_KINDS = ("same_attribute", "difference_attribute")
COMPOSITE_KINDS = ("interaction", "and_not")
ALL_KINDS = SIMPLE_KINDS + ATTRIBUTE_KINDS + COMPOSITE_KINDS
SCALINGS = ("raw", "standardized")

_SD_FLOOR = 1e-12


@dataclass(frozen=True)
class StatisticSpec:
    """One predictor column.

    ``args`` holds the attribute name for attribute kinds and the two
    (earlier) column indices for ``interaction`` / ``and_not``.
    """

    kind: str
    args: tuple = ()
    scaling: str = "raw"
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise UserError(f"unknown statistic kind {self.kind!r}")
        if self.scaling not in SCALINGS:
            raise UserError(f"unknown scaling {self.scaling!r}")
        object.__setattr__(self, "args", tuple(self.args))
        if self.kind in ATTRIBUTE_KINDS and len(self.args) != 1:
            raise UserError(f"{self.kind} takes one attribute name")
        if self.kind in COMPOSITE_KINDS and len(self.args) != 2:
            raise UserError(f"{self.kind} takes two column indices")
        if self.kind in SIMPLE_KINDS and self.args:
            raise UserError(f"{self.kind} takes no arguments")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "args": list(self.args), "scaling": self.scaling}
        if self.name is not None:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d) -> "StatisticSpec":
        if isinstance(d, str):
            return cls(d)
        unknown = set(d) - {"kind", "args", "scaling", "name"}
        if unknown:
            raise UserError(f"unknown statistic keys: {sorted(unknown)}")
        return cls(d["kind"], tuple(d.get("args", ())), d.get("scaling", "raw"), d.get("name"))


def parse_specs(items) -> list[StatisticSpec]:
    """Build a validated spec list from dicts; interaction args may be names."""
    specs: list[StatisticSpec] = []
    for item in items:
        if isinstance(item, StatisticSpec):
            spec = item
        else:
            if isinstance(item, dict) and item.get("kind") in COMPOSITE_KINDS:
                names = column_names(specs)
                args = []
                for a in item.get("args", ()):
                    if isinstance(a, str):
                        if a not in names:
                            raise UserError(f"{item['kind']} refers to unknown column {a!r}")
                        a = names.index(a)
                    args.append(a)
                item = {**item, "args": args}
            spec = StatisticSpec.from_dict(item)
        specs.append(spec)
    validate_specs(specs)
    return specs


def validate_specs(specs: Sequence[StatisticSpec]) -> None:
    if sum(s.kind == "intercept" for s in specs) > 1:
        raise UserError("a model may contain at most one intercept")
    for j, s in enumerate(specs):
        if s.kind in COMPOSITE_KINDS:
            for i in s.args:
                if not isinstance(i, (int, np.integer)) or not 0 <= i < j:
                    raise UserError(f"{s.kind} at position {j} must refer to earlier columns, "
                                    f"got {s.args}")
    names = column_names(specs)
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise UserError(f"duplicate column names: {sorted(dupes)}")


def column_names(specs: Sequence[StatisticSpec]) -> list[str]:
    names: list[str] = []
    for s in specs:
        if s.name is not None:
            names.append(s.name)
        elif s.kind == "same_attribute":
            names.append(f"same_{s.args[0]}")
        elif s.kind == "difference_attribute":
            names.append(f"diff_{s.args[0]}")
        elif s.kind == "interaction":
            names.append(f"{names[s.args[0]]}:{names[s.args[1]]}")
        elif s.kind == "and_not":
            names.append(f"{names[s.args[0]]}&!{names[s.args[1]]}")
        else:
            names.append(s.kind)
    return names


def has_intercept(specs) -> bool:
    return any(s.kind == "intercept" for s in specs)


def spec_hash(specs: Sequence[StatisticSpec], kind: str | None = None) -> str:
    payload = {"specs": [s.to_dict() for s in specs], "model": kind}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class HistoryState:
    """Sufficient summaries of the event history for all statistic kinds.

    Updated in place by :meth:`update`; use :meth:`copy` to branch.
    """

    def __init__(self, n_actors: int):
        n = int(n_actors)
        self.n_actors = n
        self.n_events = 0
        self.counts = np.zeros((n, n), np.int64)
        self.indegree = np.zeros(n, np.int64)
        self.outdegree = np.zeros(n, np.int64)
        self.otp = np.zeros((n, n), np.int64)
        self.osp = np.zeros((n, n), np.int64)
        self.isp = np.zeros((n, n), np.int64)
        # rank 1 = most recent, 0 = never
        self.send_rank = np.zeros((n, n), np.int64)
        self.recv_rank = np.zeros((n, n), np.int64)
        self.last: tuple[int, int] | None = None

    def copy(self) -> "HistoryState":
        new = HistoryState.__new__(HistoryState)
        for k, v in self.__dict__.items():
            new.__dict__[k] = v.copy() if isinstance(v, np.ndarray) else v
        return new

    @staticmethod
    def _promote(ranks, j):
        old = ranks[j]
        if old == 0:
            ranks[ranks > 0] += 1
        else:
            ranks[(ranks > 0) & (ranks < old)] += 1
        ranks[j] = 1

    def update(self, sender: int, receiver: int) -> "HistoryState":
        a, b = int(sender), int(receiver)
        C = self.counts
        c = C[a, b]
        self.otp[a, :] += C[b, :] > c
        self.otp[:, b] += C[:, a] > c
        inc = C[:, b] > c
        self.osp[a, :] += inc
        self.osp[:, a] += inc
        inc = C[a, :] > c
        self.isp[b, :] += inc
        self.isp[:, b] += inc
        C[a, b] = c + 1
        self.outdegree[a] += 1
        self.indegree[b] += 1
        self._promote(self.send_rank[a], b)
        self._promote(self.recv_rank[b], a)
        self.last = (a, b)
        self.n_events += 1
        return self


def update_history(state: HistoryState, ev: Event) -> HistoryState:
    """Consume one event (in place) and return the state."""
    return state.update(ev[1], ev[2])


@dataclass(frozen=True)
class CovariateSlice:
    event_index: int
    matrix: np.ndarray  # (D, P), rows in risk-set order


def _inverse_rank(ranks):
    out = np.zeros(ranks.shape)
    nz = ranks > 0
    out[nz] = 1.0 / ranks[nz]
    return out


def _standardize(col):
    return _standardize_columns(col[:, None])[:, 0]


def _standardize_columns(X):
    """Column z-scores with population sd; near-constant columns become 0."""
    mu = X.mean(axis=0)
    Z = X - mu
    sd = np.sqrt(np.einsum("ij,ij->j", Z, Z) / len(X))
    flat = sd <= _SD_FLOOR * np.maximum(1.0, np.abs(mu))
    Z /= np.where(flat, 1.0, sd)
    Z[:, flat] = 0.0
    return Z


class Statistics:
    """Compiled statistic specs; turns a :class:`HistoryState` into a slice."""

    def __init__(self, specs: Sequence[StatisticSpec], n_actors: int,
                 attrs: ActorAttributes | None = None):
        specs = list(specs)
        validate_specs(specs)
        self.specs = specs
        self.names = column_names(specs)
        self.risk = RiskSet(n_actors)
        n = self.risk.n_actors
        self._attr = {}
        for s in specs:
            if s.kind in ATTRIBUTE_KINDS:
                name = s.args[0]
                if attrs is None or name not in attrs:
                    raise UserError(f"unknown attribute {name!r}")
                v = attrs[name]
                if s.kind == "same_attribute":
                    full = (v[:, None] == v[None, :]).astype(float)
                else:
                    if v.dtype.kind not in "iuf":
                        raise UserError(f"difference_attribute needs a numeric attribute, "
                                        f"{name!r} is categorical")
                    full = v[:, None].astype(float) - v[None, :].astype(float)
                self._attr[id(s), name] = full[self.risk.mask]
        self._ns = n
        self._simple = [j for j, sp in enumerate(specs) if sp.kind not in COMPOSITE_KINDS]
        self._composite = [j for j, sp in enumerate(specs) if sp.kind in COMPOSITE_KINDS]
        self._simple_std = [j for j in self._simple if specs[j].scaling == "standardized"
                            and specs[j].kind != "intercept"]
        self._s = self.risk.senders
        self._r = self.risk.receivers

    @property
    def n_columns(self):
        return len(self.specs)

    def _column(self, spec, state: HistoryState, done):
        m = self.risk.mask
        s, r = self._s, self._r
        k = spec.kind
        if k == "intercept":
            return np.ones(len(s))
        if k == "inertia":
            return state.counts[m].astype(float)
        if k == "reciprocity":
            return state.counts.T[m].astype(float)
        if k == "indegree_sender":
            return state.indegree[s].astype(float)
        if k == "indegree_receiver":
            return state.indegree[r].astype(float)
        if k == "outdegree_sender":
            return state.outdegree[s].astype(float)
        if k == "outdegree_receiver":
            return state.outdegree[r].astype(float)
        if k == "otp":
            return state.otp[m].astype(float)
        if k == "itp":
            return state.otp.T[m].astype(float)
        if k == "osp":
            return state.osp[m].astype(float)
        if k == "isp":
            return state.isp[m].astype(float)
        if k.startswith("ps_"):
            if state.last is None:
                return np.zeros(len(s))
            A, B = state.last
            s_out = (s != A) & (s != B)
            r_out = (r != A) & (r != B)
            ind = {
                "ps_AB_BA": (s == B) & (r == A),
                "ps_AB_BY": (s == B) & r_out,
                "ps_AB_XA": s_out & (r == A),
                "ps_AB_XB": s_out & (r == B),
                "ps_AB_XY": s_out & r_out,
                "ps_AB_AY": (s == A) & (r != B),
            }[k]
            return ind.astype(float)
        if k == "rrank_send":
            return _inverse_rank(state.send_rank)[m]
        if k == "rrank_receive":
            return _inverse_rank(state.recv_rank)[m]
        if k in ATTRIBUTE_KINDS:
            return self._attr[id(spec), spec.args[0]]
        i, j = spec.args
        if k == "interaction":
            return done[i] * done[j]
        return done[i] * (1.0 - done[j])

    def compute(self, state: HistoryState) -> np.ndarray:
        if state.n_actors != self._ns:
            raise UserError("history and statistics disagree on the number of actors")
        P = len(self.specs)
        out = np.empty((len(self._s), P))
        # non-composite columns first, standardized together
        cols = [None] * P
        for j in self._simple:
            out[:, j] = self._column(self.specs[j], state, cols)
        if self._simple_std:
            out[:, self._simple_std] = _standardize_columns(out[:, self._simple_std])
        for j in self._simple:
            cols[j] = out[:, j]
        for j in self._composite:
            spec = self.specs[j]
            col = self._column(spec, state, cols)
            if spec.scaling == "standardized":
                col = _standardize(col)
            out[:, j] = col
            cols[j] = out[:, j]
        return out


def compute_slice(state: HistoryState, specs, attrs: ActorAttributes | None,
                  risk: RiskSet, event_index: int | None = None) -> CovariateSlice:
    """Statistics for all dyads given the history in ``state``."""
    stats = Statistics(specs, risk.n_actors, attrs)
    idx = state.n_events if event_index is None else event_index
    return CovariateSlice(idx, stats.compute(state))


def build_covariates(seq: EventSequence, specs, attrs: ActorAttributes | None = None,
                     history: HistoryState | None = None) -> Iterator[CovariateSlice]:
    """Yield one slice per event, each computed from strictly earlier events.

    ``history`` seeds the state (it is copied, not mutated); by default the
    history starts empty.
    """
    stats = specs if isinstance(specs, Statistics) else Statistics(specs, seq.n_actors, attrs)
    state = HistoryState(seq.n_actors) if history is None else history.copy()
    for m, (s, r) in enumerate(zip(seq.senders, seq.receivers)):
        yield CovariateSlice(m, stats.compute(state))
        state.update(s, r)


def history_after(seq: EventSequence, history: HistoryState | None = None) -> HistoryState:
    state = HistoryState(seq.n_actors) if history is None else history.copy()
    for s, r in zip(seq.senders, seq.receivers):
        state.update(s, r)
    return state
