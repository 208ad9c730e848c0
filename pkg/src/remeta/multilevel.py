"""Random-effects pooling of independent cluster fits.

Each cluster k contributes ``(theta_hat_k, omega_hat_k)`` from its own
maximum-likelihood fit.  The approximate multilevel model treats these as
Gaussian pseudo-data,

    beta_hat_k ~ N(mu + delta_k, omega_hat_k),    delta_k ~ N(0, Sigma),

and is fitted either by the cyclic fixed-point iteration below or by the
Gibbs sampler in :mod:`remeta.gibbs`.  With fixed effects, ``theta_hat_k``
stacks the F fixed-effect estimates ``psi_hat_k`` on top of the P random
ones.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .core import EventSequence
from .errors import NumericalError, UserError
from .estimate import FitOptions, FitResult, fit_rem
from .stats import column_names, parse_specs

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-10


@dataclass
class ClusterFit:
    """One cluster's estimates, fixed block first.

    ``theta_hat = (psi_hat, beta_hat)`` with ``n_fixed`` leading entries.
    """

    cluster_id: object
    theta_hat: np.ndarray
    omega_hat: np.ndarray
    n_events: int
    names: list[str] = field(default_factory=list)
    n_fixed: int = 0

    def __post_init__(self):
        self.theta_hat = np.asarray(self.theta_hat, float).reshape(-1)
        self.omega_hat = np.atleast_2d(np.asarray(self.omega_hat, float))
        n = len(self.theta_hat)
        if self.omega_hat.shape != (n, n):
            raise UserError(f"cluster {self.cluster_id}: covariance shape {self.omega_hat.shape} "
                            f"does not match {n} estimates")
        if not 0 <= self.n_fixed <= n:
            raise UserError(f"cluster {self.cluster_id}: bad fixed-effect count {self.n_fixed}")
        if not self.names:
            self.names = [f"x{j + 1}" for j in range(n)]

    @property
    def F(self) -> int:
        return self.n_fixed

    @property
    def P(self) -> int:
        return len(self.theta_hat) - self.n_fixed

    @property
    def psi_hat(self):
        return self.theta_hat[:self.F]

    @property
    def beta_hat(self):
        return self.theta_hat[self.F:]

    def block(self, which):
        F = self.F
        sl = {"1": slice(0, F), "2": slice(F, None)}
        return self.omega_hat[sl[which[0]], sl[which[1]]]

    @classmethod
    def from_fit(cls, fit: FitResult, cluster_id, fixed=()) -> "ClusterFit":
        """Reorder a single fit so the ``fixed`` columns (names or indices) come first."""
        idx = _column_indices(fit.names, fixed)
        order = idx + [j for j in range(len(fit.beta)) if j not in idx]
        return cls(cluster_id, fit.beta[order], fit.omega[np.ix_(order, order)], fit.n_events,
                   [fit.names[j] for j in order], len(idx))

    def to_dict(self):
        return {"cluster_id": self.cluster_id, "theta_hat": self.theta_hat.tolist(),
                "omega_hat": self.omega_hat.tolist(), "n_events": self.n_events,
                "names": list(self.names), "n_fixed": self.n_fixed}

    @classmethod
    def from_dict(cls, d):
        return cls(d["cluster_id"], d["theta_hat"], d["omega_hat"], d["n_events"],
                   list(d.get("names", [])), d.get("n_fixed", 0))


def _column_indices(names, cols):
    out = []
    for c in cols:
        if isinstance(c, (int, np.integer)):
            j = int(c)
        elif c in names:
            j = names.index(c)
        else:
            raise UserError(f"unknown column {c!r}")
        if not 0 <= j < len(names):
            raise UserError(f"column index {j} out of range")
        out.append(j)
    return out


class ClusterFits(list):
    """List of :class:`ClusterFit` plus the clusters that were left out."""

    def __init__(self, items=(), excluded=None):
        super().__init__(items)
        self.excluded: dict = dict(excluded or {})


def fit_clusters(sequences, specs, attrs=None, kind: str = "temporal", fixed=(),
                 options: FitOptions | None = None) -> ClusterFits:
    """Fit every cluster independently.

    Parameters
    ----------
    sequences : list of EventSequence or dict
        Cluster ids are list positions or dict keys.
    attrs : ActorAttributes, list or dict, optional
        One table for all clusters, or one per cluster.
    fixed : sequence of str or int
        Columns treated as fixed effects; all others are random.

    Returns
    -------
    ClusterFits
        Clusters with too few events, failed or non-converged fits, or
        dropped (constant) columns are excluded with a warning and listed in
        ``excluded``.
    """
    items = list(sequences.items()) if isinstance(sequences, dict) else list(enumerate(sequences))
    if len(items) < 2:
        raise UserError("need at least 2 clusters")
    specs = parse_specs(specs)
    P = len(specs)
    names = column_names(specs)
    _column_indices(names, fixed)
    out, excluded = [], {}
    for cid, seq in items:
        if not isinstance(seq, EventSequence):
            raise UserError(f"cluster {cid}: expected an EventSequence")
        a = attrs[cid] if isinstance(attrs, (list, dict)) else attrs
        if len(seq) < P:
            excluded[cid] = f"{len(seq)} events for {P} parameters"
            continue
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fit = fit_rem(seq, specs, a, kind, options)
        except NumericalError as exc:
            excluded[cid] = str(exc)
            continue
        if not fit.converged:
            excluded[cid] = fit.message
        elif fit.dropped:
            excluded[cid] = f"constant columns {fit.dropped}"
        else:
            out.append(ClusterFit.from_fit(fit, cid, fixed))
    for cid, why in excluded.items():
        warnings.warn(f"cluster {cid} excluded: {why}", RuntimeWarning, stacklevel=2)
    if not out:
        raise UserError("all clusters failed to fit")
    return ClusterFits(out, excluded)


@dataclass
class MultilevelEstimate:
    names: list[str]
    mu: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray
    mu_cov: np.ndarray
    psi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    psi_cov: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    cluster_ids: list = field(default_factory=list)
    n_events: list = field(default_factory=list)
    converged: bool = True
    sweeps: int = 0
    boundary: bool = False
    loglik: list = field(default_factory=list)
    monotone_violations: int = 0
    method: str = "freq"
    fixed_names: list = field(default_factory=list)

    @property
    def mu_se(self):
        return np.sqrt(np.diag(self.mu_cov))

    @property
    def psi_se(self):
        return np.sqrt(np.diag(self.psi_cov))

    @property
    def cluster_effects(self):
        """``mu + delta_k`` for every cluster, shape (K, P)."""
        return self.mu + self.delta

    def to_dict(self):
        return {
            "method": self.method, "names": list(self.names),
            "fixed_names": list(self.fixed_names),
            "mu": self.mu.tolist(), "mu_se": self.mu_se.tolist(),
            "mu_cov": self.mu_cov.tolist(), "sigma": self.sigma.tolist(),
            "psi": self.psi.tolist(), "psi_se": self.psi_se.tolist(),
            "delta": self.delta.tolist(), "cluster_ids": list(self.cluster_ids),
            "n_events": list(self.n_events), "converged": self.converged,
            "sweeps": self.sweeps, "boundary": self.boundary,
            "monotone_violations": self.monotone_violations,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def _spd_inv(A, what):
    try:
        c = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        raise NumericalError(f"{what} is not positive definite") from None
    inv = linalg.cho_solve(c, np.eye(len(A)))
    return 0.5 * (inv + inv.T)


def floor_pd(S, floor=SIGMA_FLOOR):
    """Symmetrize and lift eigenvalues below ``floor``; returns ``(S, hit)``."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() >= floor:
        return S, False
    w = np.maximum(w, floor)
    return (V * w) @ V.T, True


def joint_loglik(B, W, mu, delta, sigma):
    """Log of the joint density of pseudo-data and random effects.

    Up to a constant: ``sum_k [-1/2 r_k' W_k r_k - 1/2 log|Sigma|
    - 1/2 delta_k' Sigma^-1 delta_k]`` with ``r_k = beta_hat_k - mu - delta_k``.
    """
    K = len(B)
    R = B - mu - delta
    fit = np.einsum("ki,kij,kj->", R, W, R)
    c = linalg.cho_factor(sigma, lower=True)
    logdet = 2 * np.sum(np.log(np.diag(c[0])))
    quad = np.sum(delta * linalg.cho_solve(c, delta.T).T)
    return float(-0.5 * fit - 0.5 * K * logdet - 0.5 * quad)


def fit_random_effects_freq(fits, tol: float = 1e-8, max_sweeps: int = 10_000,
                            floor: float = SIGMA_FLOOR, marginal_weights: bool = False
                            ) -> MultilevelEstimate:
    """Cyclic fixed-point estimates of ``mu``, ``delta_k`` and ``Sigma``.

    Each sweep updates, in order,

    * ``delta_k = (W_k + Sigma^-1)^-1 W_k (beta_hat_k - mu)``
    * ``mu = (sum W_k)^-1 sum W_k (beta_hat_k - delta_k)``
    * ``Sigma = K^-1 sum delta_k delta_k'``

    with ``W_k = omega_hat_k^-1``, starting from the inverse-variance mean.
    Each update maximizes :func:`joint_loglik` in its own block, so the
    objective never decreases while the floor is inactive; decreases beyond
    1e-10 (relative) in such sweeps are counted in ``monotone_violations``.
    With ``K <= P`` the effects span at most ``K - 1`` dimensions, Sigma is
    singular and the objective is unbounded, so the floor is always hit.  Eigenvalues of Sigma are floored at
    ``floor`` and ``boundary`` reports whether the floor was ever active at
    the end.

    Parameters
    ----------
    marginal_weights : bool
        Replace the ``mu`` update by the GLS mean with weights
        ``(omega_hat_k + Sigma)^-1`` (sensitivity variant).

    Notes
    -----
    At a fixed point the ``mu`` update coincides with the GLS mean under
    ``(omega_hat_k + Sigma)^-1`` weights, so the reported covariance of
    ``mu`` is ``(sum_k (omega_hat_k + Sigma)^-1)^-1``.
    """
    fits = list(fits)
    K = len(fits)
    if K < 2:
        raise UserError(f"K={K}: between-cluster heterogeneity is unidentifiable with one cluster")
    if any(f.F for f in fits):
        raise UserError("the frequentist estimator needs all effects random (F=0); "
                        "use the Gibbs sampler for fixed effects")
    P = fits[0].P
    if any(f.P != P for f in fits):
        raise UserError("clusters have different numbers of effects")
    B = np.array([f.beta_hat for f in fits])
    O = np.array([f.omega_hat for f in fits])
    W = np.array([_spd_inv(o, f"covariance of cluster {f.cluster_id}") for o, f in zip(O, fits)])
    W_sum_inv = _spd_inv(W.sum(0), "summed cluster precision")

    mu = W_sum_inv @ np.einsum("kij,kj->i", W, B)
    delta = B - mu
    sigma, hit = floor_pd(delta.T @ delta / K, floor)
    lls = [joint_loglik(B, W, mu, delta, sigma)]
    floor_prev = hit
    violations = 0
    converged = False
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        s_inv = _spd_inv(sigma, "Sigma")
        new_delta = np.linalg.solve(W + s_inv, np.einsum("kij,kj->ki", W, B - mu)[..., None])[..., 0]
        if marginal_weights:
            V = np.linalg.inv(O + sigma)
            new_mu = np.linalg.solve(V.sum(0), np.einsum("kij,kj->i", V, B))
        else:
            new_mu = W_sum_inv @ np.einsum("kij,kj->i", W, B - new_delta)
        new_sigma, hit = floor_pd(new_delta.T @ new_delta / K, floor)
        change = max(np.abs(new_delta - delta).max(), np.abs(new_mu - mu).max(),
                     np.abs(new_sigma - sigma).max())
        delta, mu, sigma = new_delta, new_mu, new_sigma
        ll = joint_loglik(B, W, mu, delta, sigma)
        # the floor is a projection, not a block maximum, so only floor-free
        # sweeps are held to monotonicity
        if (not marginal_weights and not hit and not floor_prev
                and ll < lls[-1] - 1e-10 * max(1.0, abs(lls[-1]))):
            violations += 1
        lls.append(ll)
        floor_prev = hit
        if change < tol:
            converged = True
            break
    if hit:
        warnings.warn("Sigma reached the positive-definite floor (boundary estimate)",
                      RuntimeWarning, stacklevel=2)
    if not converged:
        warnings.warn(f"random-effects iteration did not converge in {max_sweeps} sweeps",
                      RuntimeWarning, stacklevel=2)
    mu_cov = _spd_inv(np.linalg.inv(O + sigma).sum(0), "information for mu")
    return MultilevelEstimate(list(fits[0].names), mu, sigma, delta, mu_cov,
                              cluster_ids=[f.cluster_id for f in fits],
                              n_events=[f.n_events for f in fits], converged=converged,
                              sweeps=sweep, boundary=hit, loglik=lls,
                              monotone_violations=violations, method="freq")


@dataclass
class ShrinkageReport:
    names: list[str]
    cluster_ids: list
    n_events: np.ndarray
    independent: np.ndarray
    multilevel: np.ndarray

    @property
    def shrinkage(self):
        """``beta_hat_k - (mu + delta_k)``, shape (K, P)."""
        return self.independent - self.multilevel

    def rows(self):
        S = self.shrinkage
        for i, cid in enumerate(self.cluster_ids):
            for j, n in enumerate(self.names):
                yield (cid, int(self.n_events[i]), n, self.independent[i, j],
                       self.multilevel[i, j], S[i, j])

    def size_correlation(self):
        """Spearman correlation of M_k with |shrinkage|, per effect: ``(rho, p)``."""
        from scipy.stats import spearmanr

        out = {}
        for j, n in enumerate(self.names):
            r = spearmanr(self.n_events, np.abs(self.shrinkage[:, j]))
            out[n] = (float(r.statistic), float(r.pvalue))
        return out


def shrinkage_report(fits, estimate: MultilevelEstimate) -> ShrinkageReport:
    fits = list(fits)
    if [f.cluster_id for f in fits] != list(estimate.cluster_ids):
        raise UserError("fits and estimate refer to different clusters")
    return ShrinkageReport(list(estimate.names), list(estimate.cluster_ids),
                           np.array([f.n_events for f in fits]),
                           np.array([f.beta_hat for f in fits]), estimate.cluster_effects)


def mse_study(truths, fits, estimate: MultilevelEstimate) -> dict:
    """Per-effect mean squared error of multilevel vs independent estimates.

    Parameters
    ----------
    truths : array_like or dict
        True random-effect vectors indexed by cluster id.
    """
    fits = list(fits)
    T = np.array([np.asarray(truths[f.cluster_id], float) for f in fits])
    mle = np.array([f.beta_hat for f in fits])
    ml = estimate.cluster_effects
    if T.shape != mle.shape:
        raise UserError(f"truths have shape {T.shape}, estimates {mle.shape}")
    out = {}
    for j, n in enumerate(estimate.names):
        a = float(np.mean((ml[:, j] - T[:, j]) ** 2))
        b = float(np.mean((mle[:, j] - T[:, j]) ** 2))
        out[n] = {"mse_multilevel": a, "mse_mle": b, "ratio": a / b if b > 0 else np.nan}
    return out
