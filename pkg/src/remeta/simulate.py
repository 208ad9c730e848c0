"""Synthetic relational event histories with known effects.

Events are drawn from the piecewise-constant exponential model: given the
history, every dyad fires at rate ``exp(x'beta)``, the waiting time to the
next event is exponential with the summed rate, and the dyad is chosen with
probability proportional to its rate.  History statistics start empty at
``t = 0`` with no burn-in.

Seeding: one ``numpy.random.SeedSequence`` per design.  For cluster designs
it is spawned into one child for the random-effect draws plus one child per
cluster, so each cluster's events do not depend on how many clusters were
simulated before it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import ActorAttributes, EventSequence
from .errors import RateOverflowError, UserError
from .likelihood import MAX_EXPONENT
from .stats import HistoryState, Statistics, StatisticSpec, parse_specs


@dataclass
class SimDesign:
    """Single-sequence design.

    ``beta_true`` is aligned with ``specs``.
    """

    n_actors: int
    n_events: int
    specs: list
    beta_true: np.ndarray
    seed: int = 0
    attrs: ActorAttributes | None = None
    note: str = ""

    def __post_init__(self):
        self.specs = parse_specs(self.specs)
        self.beta_true = np.asarray(self.beta_true, float)
        if len(self.beta_true) != len(self.specs):
            raise UserError(f"beta_true has {len(self.beta_true)} entries for "
                            f"{len(self.specs)} statistics")
        if self.n_actors < 2 or self.n_events < 1:
            raise UserError("need at least 2 actors and 1 event")

    @property
    def names(self):
        return Statistics(self.specs, self.n_actors, self.attrs).names

    def to_dict(self):
        return {"type": "sequence", "n_actors": self.n_actors, "n_events": self.n_events,
                "specs": [s.to_dict() for s in self.specs],
                "beta_true": self.beta_true.tolist(), "seed": self.seed, "note": self.note}


@dataclass
class ClusterDesign:
    """K independent sequences with cluster-specific effects.

    Columns listed in ``random`` get ``mu_true + delta_k`` with
    ``delta_k ~ N(0, sigma_true)``; the remaining columns are fixed at
    ``psi_true`` in every cluster.
    """

    n_actors: int
    cluster_sizes: list
    specs: list
    mu_true: np.ndarray
    sigma_true: np.ndarray
    seed: int = 0
    random: list | None = None
    psi_true: np.ndarray | None = None
    note: str = ""

    def __post_init__(self):
        self.specs = parse_specs(self.specs)
        P = len(self.specs)
        self.cluster_sizes = [int(m) for m in self.cluster_sizes]
        self.random = list(range(P)) if self.random is None else [int(j) for j in self.random]
        n_rand = len(self.random)
        self.mu_true = np.asarray(self.mu_true, float).reshape(-1)
        self.sigma_true = np.atleast_2d(np.asarray(self.sigma_true, float))
        self.psi_true = (np.zeros(0) if self.psi_true is None
                         else np.asarray(self.psi_true, float).reshape(-1))
        if len(self.mu_true) != n_rand or self.sigma_true.shape != (n_rand, n_rand):
            raise UserError(f"mu_true/sigma_true must match the {n_rand} random columns")
        if len(self.psi_true) != P - n_rand:
            raise UserError(f"psi_true must have {P - n_rand} entries")
        if not np.allclose(self.sigma_true, self.sigma_true.T):
            raise UserError("sigma_true is not symmetric")
        if n_rand and np.linalg.eigvalsh(self.sigma_true).min() < -1e-12:
            raise UserError("sigma_true is not positive semidefinite")

    @property
    def K(self):
        return len(self.cluster_sizes)

    @property
    def fixed(self):
        return [j for j in range(len(self.specs)) if j not in self.random]

    def to_dict(self):
        return {"type": "clusters", "n_actors": self.n_actors,
                "cluster_sizes": self.cluster_sizes, "specs": [s.to_dict() for s in self.specs],
                "mu_true": self.mu_true.tolist(), "sigma_true": self.sigma_true.tolist(),
                "random": self.random, "psi_true": self.psi_true.tolist(), "seed": self.seed,
                "note": self.note}


def design_from_dict(d) -> SimDesign | ClusterDesign:
    d = dict(d)
    kind = d.pop("type", "sequence")
    d.pop("comment", None)
    if kind == "sequence":
        return SimDesign(**d)
    if kind == "clusters":
        return ClusterDesign(**d)
    raise UserError(f"unknown design type {kind!r}")


def load_design(path):
    with open(path) as fh:
        return design_from_dict(json.load(fh))


def _overflow_message(stats: Statistics, X, beta, d, m):
    contrib = X[d] * beta
    j = int(np.argmax(np.abs(contrib)))
    s, r = stats.risk.dyad(d)
    return (f"rate overflow at event {m} on dyad ({s}, {r}): statistic "
            f"{stats.names[j]!r} contributes {contrib[j]:.4g} to the log-rate")


def simulate_sequence(design: SimDesign, rng: np.random.Generator | None = None,
                      beta=None) -> EventSequence:
    """Draw one event sequence from ``design``.

    Parameters
    ----------
    design : SimDesign
    rng : numpy.random.Generator, optional
        Defaults to ``default_rng(design.seed)``.
    beta : array_like, optional
        Overrides ``design.beta_true``.

    Returns
    -------
    EventSequence
        Starts at ``onset = 0`` and ends at the last event.
    """
    rng = rng if rng is not None else np.random.default_rng(design.seed)
    beta = design.beta_true if beta is None else np.asarray(beta, float)
    N = design.n_actors
    stats = Statistics(design.specs, N, design.attrs)
    state = HistoryState(N)
    M = design.n_events
    times = np.empty(M)
    senders = np.empty(M, dtype=np.int64)
    receivers = np.empty(M, dtype=np.int64)
    t = 0.0
    for m in range(M):
        X = stats.compute(state)
        eta = X @ beta
        top = int(np.argmax(eta))
        if eta[top] > MAX_EXPONENT:
            raise RateOverflowError(_overflow_message(stats, X, beta, top, m))
        lam = np.exp(eta)
        total = lam.sum()
        if not total > 0:
            raise RateOverflowError(f"all rates underflow to zero at event {m}")
        dt = rng.exponential(1.0 / total)
        if t + dt <= t:
            raise RateOverflowError(
                "waiting time below floating-point resolution; "
                + _overflow_message(stats, X, beta, top, m))
        t += dt
        cum = np.cumsum(lam)
        d = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(lam) - 1)
        s, r = stats.risk.dyad(d)
        times[m], senders[m], receivers[m] = t, s, r
        state.update(s, r)
    return EventSequence(times, senders, receivers, N)


def draw_cluster_effects(design: ClusterDesign, rng: np.random.Generator) -> np.ndarray:
    """``(K, P)`` matrix of full coefficient vectors, one row per cluster."""
    P = len(design.specs)
    B = np.empty((design.K, P))
    if design.random:
        delta = rng.multivariate_normal(np.zeros(len(design.random)), design.sigma_true,
                                        size=design.K, method="eigh")
        B[:, design.random] = design.mu_true + delta
    if design.fixed:
        B[:, design.fixed] = design.psi_true
    return B


@dataclass
class ClusterSimulation:
    sequences: list
    beta_k: np.ndarray
    design: ClusterDesign
    truth: dict = field(default_factory=dict)


def simulate_clusters(design: ClusterDesign) -> ClusterSimulation:
    """Draw cluster effects, then simulate each cluster independently."""
    children = np.random.SeedSequence(design.seed).spawn(design.K + 1)
    B = draw_cluster_effects(design, np.random.default_rng(children[0]))
    seqs = []
    for k, M_k in enumerate(design.cluster_sizes):
        sub = SimDesign(design.n_actors, M_k, design.specs, B[k], design.seed)
        seqs.append(simulate_sequence(sub, np.random.default_rng(children[k + 1])))
    names = Statistics(design.specs, design.n_actors).names
    truth = {"names": names, "mu_true": design.mu_true.tolist(),
             "sigma_true": design.sigma_true.tolist(), "psi_true": design.psi_true.tolist(),
             "random": design.random, "beta_k": B.tolist(),
             "cluster_sizes": design.cluster_sizes, "seed": design.seed}
    return ClusterSimulation(seqs, B, design, truth)


STREAM_EFFECTS = [
    ("intercept", None, -5.0),
    ("inertia", None, 0.01),
    ("reciprocity", None, 0.01),
    ("indegree_receiver", None, -0.02),
    ("indegree_sender", None, -0.02),
    ("outdegree_receiver", None, -0.02),
    # sender activity effect on the out-degree side
    ("outdegree_sender", None, -0.01),
    ("otp", None, 0.02),
    ("itp", None, -0.02),
    ("osp", None, 0.01),
    ("isp", None, -0.01),
    ("interaction", ("inertia", "reciprocity"), -0.01),
    ("interaction", ("indegree_receiver", "indegree_sender"), -0.05),
    ("interaction", ("outdegree_receiver", "outdegree_sender"), -0.02),
    ("interaction", ("otp", "itp"), -0.01),
]


def stream_design(seed: int = 1, n_actors: int = 25, n_events: int = 5000,
                  scaling: str = "standardized") -> SimDesign:
    """The single-stream reproduction design: 14 effects plus an intercept.

    Count statistics are standardized across the risk set at every event, so
    the small true effects act per standard deviation of each statistic.
    """
    items = []
    for kind, args, _ in STREAM_EFFECTS:
        item = {"kind": kind, "scaling": "raw" if kind == "intercept" else scaling}
        if args:
            item["args"] = list(args)
        items.append(item)
    beta = [b for *_, b in STREAM_EFFECTS]
    return SimDesign(n_actors, n_events, items, beta, seed,
                     note="outdegree_sender effect set to -0.01; counts standardized per event")


CLUSTER_SPECS = [
    {"kind": "intercept"},
    {"kind": "inertia", "scaling": "standardized"},
    {"kind": "reciprocity", "scaling": "standardized"},
    {"kind": "otp", "scaling": "standardized"},
    {"kind": "itp", "scaling": "standardized"},
    {"kind": "ps_AB_XA"},
    {"kind": "ps_AB_XB"},
]
CLUSTER_MU = [-4.0, 0.3, 0.2, 0.1, -0.1, 0.5, 0.3]
CLUSTER_SD = [0.3, 0.15, 0.15, 0.1, 0.1, 0.3, 0.3]


def cluster_design(cluster_sizes=None, seed: int = 2, n_actors: int = 10,
                   mu=None, sd=None) -> ClusterDesign:
    """The multilevel reproduction design: six effects plus an intercept.

    By default 30 clusters, ten each with 50, 500 and 2000 events.  All
    columns are random effects with independent normal deviations.
    """
    if cluster_sizes is None:
        cluster_sizes = [50] * 10 + [500] * 10 + [2000] * 10
    mu = np.asarray(CLUSTER_MU if mu is None else mu, float)
    sd = np.asarray(CLUSTER_SD if sd is None else sd, float)
    return ClusterDesign(n_actors, list(cluster_sizes), CLUSTER_SPECS, mu, np.diag(sd ** 2),
                         seed, note="count statistics standardized per event")


def default_specs(kind: str) -> list[StatisticSpec]:
    """Specs of the shipped reproduction designs (``'stream'`` or ``'clusters'``)."""
    if kind == "stream":
        return stream_design().specs
    if kind == "clusters":
        return parse_specs(CLUSTER_SPECS)
    raise UserError(f"unknown design {kind!r}")
