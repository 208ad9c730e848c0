"""Domain types: events, sequences, risk sets and actor attributes."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import UserError


class Event(NamedTuple):
    time: float
    sender: int
    receiver: int


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EventSequence:
    """Time-ordered directed events among ``n_actors`` actors.

    Stored column-wise; ``events`` gives the row view.  Construction does not
    validate; call :func:`validate_sequence` (diagnostics) or :meth:`check`
    (raises).
    """

    times: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    n_actors: int
    onset: float = 0.0
    end_time: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times, float))
        object.__setattr__(self, "senders", _frozen(self.senders, np.int64))
        object.__setattr__(self, "receivers", _frozen(self.receivers, np.int64))
        if not (len(self.times) == len(self.senders) == len(self.receivers)):
            raise UserError("times, senders and receivers differ in length")
        if self.end_time is None:
            last = float(self.times[-1]) if len(self.times) else float(self.onset)
            object.__setattr__(self, "end_time", last)
        object.__setattr__(self, "onset", float(self.onset))
        object.__setattr__(self, "end_time", float(self.end_time))
        object.__setattr__(self, "n_actors", int(self.n_actors))

    @classmethod
    def from_events(cls, events: Iterable, n_actors: int, onset=0.0, end_time=None):
        rows = [tuple(e) for e in events]
        if rows:
            t, s, r = zip(*rows)
        else:
            t, s, r = (), (), ()
        return cls(np.array(t, float), np.array(s, np.int64), np.array(r, np.int64),
                   n_actors, onset, end_time)

    def __len__(self):
        return len(self.times)

    @property
    def events(self) -> list[Event]:
        return [Event(float(t), int(s), int(r))
                for t, s, r in zip(self.times, self.senders, self.receivers)]

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            start, stop, step = idx.indices(len(self))
            if step != 1:
                raise ValueError("only contiguous slices are supported")
            onset = self.onset if start == 0 else float(self.times[start - 1])
            end = float(self.times[stop - 1]) if stop > start else onset
            return EventSequence(self.times[start:stop], self.senders[start:stop],
                                 self.receivers[start:stop], self.n_actors, onset, end)
        return Event(float(self.times[idx]), int(self.senders[idx]), int(self.receivers[idx]))

    def with_window(self, onset=None, end_time=None) -> "EventSequence":
        return EventSequence(self.times, self.senders, self.receivers, self.n_actors,
                             self.onset if onset is None else onset,
                             self.end_time if end_time is None else end_time)

    @property
    def inter_event_times(self) -> np.ndarray:
        return np.diff(np.concatenate([[self.onset], self.times]))

    def check(self) -> "EventSequence":
        report = validate_sequence(self)
        if not report.ok:
            raise UserError("invalid event sequence: " + "; ".join(report.violations[:5]))
        return self


@dataclass(frozen=True)
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_sequence(seq: EventSequence) -> ValidationReport:
    """Collect every violation of the sequence invariants without raising."""
    out = []
    n = seq.n_actors
    if n < 2:
        out.append(f"n_actors must be at least 2, got {n}")
    prev = seq.onset
    if prev < 0:
        out.append(f"negative onset {prev}")
    for m, (t, s, r) in enumerate(zip(seq.times, seq.senders, seq.receivers)):
        if not np.isfinite(t):
            out.append(f"non-finite time at index {m}")
        elif t <= prev:
            out.append(f"non-increasing time at index {m}")
        prev = t if np.isfinite(t) else prev
        if s == r:
            out.append(f"self-loop at index {m}")
        for role, a in (("sender", s), ("receiver", r)):
            if a < 0 or a >= n:
                out.append(f"{role} {a} out of range at index {m}")
    if len(seq) and seq.end_time < seq.times[-1]:
        out.append(f"end_time {seq.end_time} precedes last event time {seq.times[-1]}")
    return ValidationReport(out)


class RiskSet:
    """All directed pairs (s, r), s != r, enumerated row-major."""

    def __init__(self, n_actors: int):
        if n_actors < 2:
            raise UserError("a risk set needs at least 2 actors")
        self.n_actors = int(n_actors)
        n = self.n_actors
        self.mask = ~np.eye(n, dtype=bool)
        self.mask.setflags(write=False)
        s, r = np.nonzero(self.mask)
        self.senders = s
        self.receivers = r
        self.senders.setflags(write=False)
        self.receivers.setflags(write=False)

    def __len__(self):
        return self.n_actors * (self.n_actors - 1)

    @property
    def dyads(self) -> list[tuple[int, int]]:
        return list(zip(self.senders.tolist(), self.receivers.tolist()))

    def index(self, s, r):
        """Dyad index of (s, r); vectorised over array arguments."""
        s = np.asarray(s)
        r = np.asarray(r)
        if np.any(s == r):
            raise UserError("self-loop not in risk set")
        n = self.n_actors
        if np.any((s < 0) | (s >= n) | (r < 0) | (r >= n)):
            raise UserError("actor id out of range")
        idx = s * (n - 1) + r - (r > s)
        return int(idx) if idx.ndim == 0 else idx

    def dyad(self, index) -> tuple[int, int]:
        if not 0 <= index < len(self):
            raise UserError(f"dyad index {index} out of range")
        return int(self.senders[index]), int(self.receivers[index])


def dyad_index(risk: RiskSet, s: int, r: int) -> int:
    return risk.index(s, r)


@dataclass(frozen=True)
class ActorAttributes:
    """Per-actor attribute columns; every actor has a value for every column."""

    n_actors: int
    table: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for name, values in self.table.items():
            arr = np.asarray(values)
            if arr.shape != (self.n_actors,):
                raise UserError(f"attribute {name!r} needs {self.n_actors} values, "
                                f"got shape {arr.shape}")
            if arr.dtype.kind == "f" and np.isnan(arr).any():
                raise UserError(f"attribute {name!r} has missing values")
            if arr.dtype.kind == "O" and any(v is None or v == "" for v in arr):
                raise UserError(f"attribute {name!r} has missing values")
            arr = arr.copy()
            arr.setflags(write=False)
            clean[name] = arr
        object.__setattr__(self, "table", clean)

    def __getitem__(self, name) -> np.ndarray:
        try:
            return self.table[name]
        except KeyError:
            raise UserError(f"unknown attribute {name!r}") from None

    def __contains__(self, name):
        return name in self.table


# -- CSV ingestion -----------------------------------------------------------

class ActorTable:
    """Label <-> dense id side table built during ingestion."""

    def __init__(self, labels: Sequence[str] = ()):
        self.labels: list[str] = []
        self._ids: dict[str, int] = {}
        for lab in labels:
            self.add(lab)

    def add(self, label: str) -> int:
        label = str(label)
        if label not in self._ids:
            self._ids[label] = len(self.labels)
            self.labels.append(label)
        return self._ids[label]

    def __getitem__(self, label) -> int:
        return self._ids[str(label)]

    def __len__(self):
        return len(self.labels)


def _is_int(text):
    try:
        return int(text) >= 0 and str(int(text)) == text.strip()
    except ValueError:
        return False


def _resolve_actors(senders, receivers, n_actors=None, table=None):
    labels = list(senders) + list(receivers)
    if table is None and all(_is_int(x) for x in labels):
        ids = [int(x) for x in labels]
        n = n_actors if n_actors is not None else (max(ids) + 1 if ids else 0)
        table = ActorTable(str(i) for i in range(n))
    else:
        if table is None:
            table = ActorTable(sorted(set(labels)))
        else:
            for lab in labels:
                table.add(lab)
        ids = [table[x] for x in labels]
        n = n_actors if n_actors is not None else len(table)
    k = len(senders)
    return np.array(ids[:k], np.int64), np.array(ids[k:], np.int64), n, table


def read_events_csv(path, n_actors=None, actors: ActorTable | None = None,
                    onset=0.0, end_time=None):
    """Read ``time,sender,receiver`` rows.

    Returns ``(sequence, actor_table)``.  Integer labels are used as ids
    directly; any other labels are mapped to ids in sorted order unless an
    existing table is passed in.
    """
    rows = _read_rows(path, required=("time", "sender", "receiver"))
    seq, table = _rows_to_sequence(rows, n_actors, actors, onset, end_time)
    return seq, table


def read_clustered_events_csv(path, actors: ActorTable | None = None):
    """Read a CSV with a ``cluster`` column; returns ``{cluster: (seq, table)}``."""
    rows = _read_rows(path, required=("time", "sender", "receiver", "cluster"))
    groups: dict[str, list] = {}
    for row in rows:
        groups.setdefault(row["cluster"], []).append(row)
    return {c: _rows_to_sequence(g, None, actors, 0.0, None) for c, g in groups.items()}


def _read_rows(path, required):
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise UserError(f"{path}: missing column(s) {', '.join(missing)}")
        return [dict(row) for row in reader]


def _rows_to_sequence(rows, n_actors, actors, onset, end_time):
    try:
        times = np.array([float(r["time"]) for r in rows])
    except ValueError as exc:
        raise UserError(f"bad time value: {exc}") from None
    s, r, n, table = _resolve_actors([x["sender"].strip() for x in rows],
                                     [x["receiver"].strip() for x in rows],
                                     n_actors, actors)
    return EventSequence(times, s, r, n, onset, end_time), table


def write_events_csv(path, seq: EventSequence, labels: Sequence[str] | None = None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "sender", "receiver"])
        for t, s, r in zip(seq.times, seq.senders, seq.receivers):
            if labels is None:
                w.writerow([repr(float(t)), int(s), int(r)])
            else:
                w.writerow([repr(float(t)), labels[s], labels[r]])


def read_attributes_csv(path, actors: ActorTable) -> ActorAttributes:
    """Read ``actor,<attr1>,...``; numeric columns become floats."""
    rows = _read_rows(path, required=("actor",))
    if not rows:
        raise UserError(f"{path}: no attribute rows")
    names = [c for c in rows[0] if c != "actor"]
    n = len(actors)
    cols: dict[str, list] = {c: [None] * n for c in names}
    for row in rows:
        try:
            i = actors[row["actor"].strip()]
        except KeyError:
            continue
        for c in names:
            cols[c][i] = (row[c] or "").strip()
    table = {}
    for c, vals in cols.items():
        if any(v is None or v == "" for v in vals):
            raise UserError(f"attribute {c!r} has missing values")
        try:
            table[c] = np.array([float(v) for v in vals])
        except ValueError:
            table[c] = np.array(vals, dtype=object)
    return ActorAttributes(n, table)
