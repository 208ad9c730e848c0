"""Gibbs sampler for the approximate mixed-effects model.

Pseudo-data ``theta_hat_k = (psi_hat_k, beta_hat_k) ~ N((psi, mu + delta_k),
omega_hat_k)`` with a flat prior on ``(psi, mu)``, ``delta_k ~ N(0, Sigma)``
and the matrix Half-t prior

    Sigma | alpha ~ IW(eta + P - 1, 2 eta diag(1/alpha)),
    alpha_i ~ IG(1/2, 1/d_i^2).

Setting ``eta = 2`` makes every correlation in Sigma uniform on (-1, 1) a
priori and gives each standard deviation a Half-t prior with scale ``d_i``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import ndtri
from scipy.stats import rankdata

from .errors import NumericalError, UserError
from .multilevel import SIGMA_FLOOR, fit_random_effects_freq, floor_pd

log = logging.getLogger(__name__)


@dataclass
class GibbsConfig:
    eta: float = 2.0
    d: float | np.ndarray = 1e5
    iterations: int = 5000
    burn_in: int = 1000
    thin: int = 1
    chains: int = 4
    seed: int = 0
    interweave: bool = True

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise UserError("need iterations > burn_in >= 0")
        if self.eta <= 0:
            raise UserError("eta must be positive")
        if np.any(np.asarray(self.d, float) <= 0):
            raise UserError("d must be positive")
        if self.thin < 1 or self.chains < 1:
            raise UserError("thin and chains must be at least 1")

    def d_vector(self, P):
        d = np.broadcast_to(np.asarray(self.d, float), (P,)).copy()
        return d


def sample_inverse_gamma(rng, shape, rate):
    """Draw from IG(shape, rate), density proportional to x^(-shape-1) exp(-rate/x)."""
    return 1.0 / rng.gamma(shape, 1.0 / np.asarray(rate, float))


def sample_wishart_bartlett(rng, df, scale_chol):
    """Wishart(df, L L') draw via the Bartlett decomposition; ``scale_chol`` is L."""
    P = len(scale_chol)
    A = np.zeros((P, P))
    A[np.diag_indices(P)] = np.sqrt(rng.chisquare(df - np.arange(P)))
    il = np.tril_indices(P, -1)
    A[il] = rng.standard_normal(len(il[0]))
    LA = scale_chol @ A
    return LA @ LA.T


def sample_inverse_wishart(rng, df, scale):
    """Draw ``Sigma ~ IW(df, scale)``, mean ``scale / (df - P - 1)``.

    Uses ``Sigma^-1 ~ Wishart(df, scale^-1)``.
    """
    P = len(scale)
    if df <= P - 1:
        raise UserError(f"inverse-Wishart needs df > P - 1, got {df}")
    L_inv = linalg.cholesky(_inv_spd(scale), lower=True)
    W = sample_wishart_bartlett(rng, df, L_inv)
    S = _inv_spd(W)
    return S


def _inv_spd(A):
    c = linalg.cho_factor(A, lower=True)
    inv = linalg.cho_solve(c, np.eye(len(A)))
    return 0.5 * (inv + inv.T)


def sample_prior(cfg: GibbsConfig, P: int, n: int, rng=None):
    """Independent draws ``(Sigma, alpha)`` from the matrix Half-t prior."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    d = cfg.d_vector(P)
    sig = np.empty((n, P, P))
    alph = np.empty((n, P))
    for i in range(n):
        a = sample_inverse_gamma(rng, 0.5, 1.0 / d ** 2)
        sig[i] = sample_inverse_wishart(rng, cfg.eta + P - 1, 2 * cfg.eta * np.diag(1.0 / a))
        alph[i] = a
    return sig, alph


def correlations(sigmas):
    """Off-diagonal correlations of a stack of covariance matrices, shape (n, P(P-1)/2)."""
    sd = np.sqrt(np.einsum("nii->ni", sigmas))
    R = sigmas / sd[:, :, None] / sd[:, None, :]
    iu = np.triu_indices(sigmas.shape[1], 1)
    return R[:, iu[0], iu[1]]


@dataclass
class GibbsChain:
    """Retained draws, shape (chains, draws, ...)."""

    names: list[str]
    fixed_names: list[str]
    psi: np.ndarray
    mu: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    cluster_ids: list = field(default_factory=list)
    config: GibbsConfig | None = None

    @property
    def n_draws(self):
        return self.mu.shape[0] * self.mu.shape[1]

    def flat(self, name):
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])

    def parameters(self):
        """``{label: (chains, draws)}`` for every scalar parameter."""
        out = {}
        for j, n in enumerate(self.fixed_names):
            out[f"psi[{n}]"] = self.psi[:, :, j]
        for j, n in enumerate(self.names):
            out[f"mu[{n}]"] = self.mu[:, :, j]
        for k, cid in enumerate(self.cluster_ids):
            for j, n in enumerate(self.names):
                out[f"delta[{cid},{n}]"] = self.delta[:, :, k, j]
        P = len(self.names)
        for i in range(P):
            for j in range(i, P):
                out[f"Sigma[{self.names[i]},{self.names[j]}]"] = self.sigma[:, :, i, j]
        for j, n in enumerate(self.names):
            out[f"alpha[{n}]"] = self.alpha[:, :, j]
        return out

    def summary(self):
        """Posterior mean, sd, central 95% interval, split R-hat, ESS and MCSE."""
        rows = {}
        for label, x in self.parameters().items():
            flat = x.reshape(-1)
            e = ess(x)
            rows[label] = {
                "mean": float(flat.mean()), "sd": float(flat.std(ddof=1)),
                "q2.5": float(np.quantile(flat, 0.025)), "q97.5": float(np.quantile(flat, 0.975)),
                "rhat": split_rhat(x), "ess": e, "mcse": float(flat.std(ddof=1) / np.sqrt(e)),
            }
        return rows

    def posterior_mean(self, name):
        return self.flat(name).mean(axis=0)

    def write_draws(self, path):
        """One row per retained draw with chain and iteration columns."""
        params = self.parameters()
        labels = list(params)
        C, S = self.mu.shape[:2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "draw"] + labels)
            for c in range(C):
                for s in range(S):
                    w.writerow([c, s] + [repr(float(params[l][c, s])) for l in labels])
        return C * S


def _prepare(fits):
    fits = list(fits)
    if len(fits) < 2:
        raise UserError("need at least 2 clusters")
    F, P = fits[0].F, fits[0].P
    if any(f.F != F or f.P != P for f in fits):
        raise UserError("clusters disagree on the fixed/random split")
    if P < 1:
        raise UserError("the Gibbs sampler needs at least one random effect")
    T = np.array([f.theta_hat for f in fits])
    O = np.array([f.omega_hat for f in fits])
    W = np.empty_like(O)
    S_inv = np.empty((len(fits), P, P))
    G = np.empty((len(fits), P, F))  # omega_21 omega_11^-1
    for k, f in enumerate(fits):
        try:
            W[k] = _inv_spd(O[k])
        except linalg.LinAlgError:
            raise NumericalError(f"covariance of cluster {f.cluster_id} is not "
                                 f"positive definite") from None
        o11, o21, o22 = f.block("11"), f.block("21"), f.block("22")
        if F:
            G[k] = linalg.solve(o11, o21.T, assume_a="pos").T
            S = o22 - G[k] @ o21.T
        else:
            S = o22
        try:
            S_inv[k] = _inv_spd(S)
        except linalg.LinAlgError:
            raise NumericalError(f"conditional covariance S_k of cluster {f.cluster_id} "
                                 f"is not positive definite") from None
    return fits, F, P, T, W, S_inv, G


def _initial_values(fits, F, P, T, W):
    if F == 0:
        # only a starting point; a boundary warning here is noise
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            est = fit_random_effects_freq(fits)
        return np.zeros(0), est.mu.copy(), est.delta.copy(), est.sigma.copy()
    # per-block inverse-variance means
    theta = np.linalg.solve(W.sum(0), np.einsum("kij,kj->i", W, T))
    psi, mu = theta[:F], theta[F:]
    delta = T[:, F:] - mu
    sigma, _ = floor_pd(delta.T @ delta / len(fits))
    return psi, mu, delta, sigma


def _run_chain(rng, cfg, T, W, S_inv, G, F, P, init, store):
    K = len(T)
    d = cfg.d_vector(P)
    eta = cfg.eta
    psi, mu, delta, sigma = (np.array(x, float, copy=True) for x in init)
    # Sigma must be comfortably PD to start; the boundary floor is too small
    sigma, _ = floor_pd(sigma, max(SIGMA_FLOOR, 1e-6 * max(1.0, np.abs(sigma).max())))
    W_sum = W.sum(0)
    L_theta = linalg.cholesky(W_sum, lower=True)
    cov_theta = _inv_spd(W_sum)
    alpha = sample_inverse_gamma(rng, (eta + P) / 2, eta * np.diag(_inv_spd(sigma)) + 1 / d ** 2)
    psi_hat, beta_hat = T[:, :F], T[:, F:]
    out_i = 0
    for it in range(cfg.iterations):
        try:
            # (psi, mu) | delta
            resid = T.copy()
            resid[:, F:] -= delta
            mean = cov_theta @ np.einsum("kij,kj->i", W, resid)
            z = rng.standard_normal(F + P)
            theta = mean + linalg.solve_triangular(L_theta.T, z, lower=False)
            psi, mu = theta[:F], theta[F:]
            # delta_k | psi, mu, Sigma
            s_inv = _inv_spd(sigma)
            Q = S_inv + s_inv
            if F:
                Bk = -np.einsum("kpf,kf->kp", G, psi_hat - psi)
            else:
                Bk = 0.0
            rhs = np.einsum("kij,kj->ki", S_inv, beta_hat - mu + Bk)
            Lq = np.linalg.cholesky(Q)
            # mean = Q^-1 rhs; draw = mean + L^-T z
            y = np.linalg.solve(Lq, rhs[..., None])
            m = np.linalg.solve(np.swapaxes(Lq, 1, 2), y)[..., 0]
            z = rng.standard_normal((K, P))
            delta = m + np.linalg.solve(np.swapaxes(Lq, 1, 2), z[..., None])[..., 0]
            if cfg.interweave:
                # redraw mu given the cluster effects b_k = mu + delta_k (centered
                # form); the target is unchanged and mu no longer crawls when the
                # clusters are precisely estimated
                b = mu + delta
                Ls = linalg.cholesky(sigma / K, lower=True)
                mu = b.mean(axis=0) + Ls @ rng.standard_normal(P)
                delta = b - mu
            # Sigma | delta, alpha
            scale = 2 * eta * np.diag(1.0 / alpha) + delta.T @ delta
            sigma = sample_inverse_wishart(rng, eta + K + P - 1, scale)
            # alpha | Sigma
            alpha = sample_inverse_gamma(rng, (eta + P) / 2, eta * np.diag(_inv_spd(sigma)) + 1 / d ** 2)
        except (ValueError, linalg.LinAlgError) as exc:
            # NaN inputs or a numerically singular scale matrix
            raise NumericalError(f"non-finite draw at iteration {it} ({exc})") from None
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(delta))
                and np.all(np.isfinite(sigma)) and np.all(np.isfinite(alpha))):
            raise NumericalError(f"non-finite draw at iteration {it}")
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            store["psi"][out_i] = psi
            store["mu"][out_i] = mu
            store["delta"][out_i] = delta
            store["sigma"][out_i] = sigma
            store["alpha"][out_i] = alpha
            out_i += 1


def gibbs_mixed(fits, cfg: GibbsConfig | None = None) -> GibbsChain:
    """Run ``cfg.chains`` independent chains.

    Each iteration draws ``(psi, mu) | delta``, ``delta_k | psi, mu, Sigma``,
    ``Sigma | delta, alpha`` and ``alpha | Sigma`` from their full
    conditionals.  With ``cfg.interweave`` an extra step after the delta draw
    resamples ``mu`` given ``mu + delta_k`` and Sigma, which leaves the
    posterior unchanged and fixes the slow mixing of ``mu`` when the cluster
    covariances are small relative to Sigma.  ``interweave=False`` runs the
    four conditionals alone.

    Chain ``c`` uses the ``c``-th child of ``SeedSequence(cfg.seed)``, so any
    chain can be reproduced alone.  Chains start at the frequentist estimate
    (all-random models) or at the inverse-variance means, jittered by one
    draw from the conditional of ``(psi, mu)``.
    """
    cfg = cfg or GibbsConfig()
    fits, F, P, T, W, S_inv, G = _prepare(fits)
    K = len(fits)
    init = _initial_values(fits, F, P, T, W)
    n_keep = len(range(cfg.burn_in, cfg.iterations, cfg.thin))
    draws = {
        "psi": np.empty((cfg.chains, n_keep, F)),
        "mu": np.empty((cfg.chains, n_keep, P)),
        "delta": np.empty((cfg.chains, n_keep, K, P)),
        "sigma": np.empty((cfg.chains, n_keep, P, P)),
        "alpha": np.empty((cfg.chains, n_keep, P)),
    }
    cov_theta = _inv_spd(W.sum(0))
    for c, child in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.chains)):
        rng = np.random.default_rng(child)
        jitter = rng.multivariate_normal(np.zeros(F + P), cov_theta)
        start = (init[0] + jitter[:F], init[1] + jitter[F:], init[2], init[3])
        store = {k: v[c] for k, v in draws.items()}
        _run_chain(rng, cfg, T, W, S_inv, G, F, P, start, store)
    names = fits[0].names[F:]
    return GibbsChain(list(names), list(fits[0].names[:F]), draws["psi"], draws["mu"],
                      draws["delta"], draws["sigma"], draws["alpha"],
                      [f.cluster_id for f in fits], cfg)


def _split(x):
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, x.shape[1] - n:]], axis=0)


def _rhat_basic(x):
    m, n = x.shape
    means = x.mean(axis=1)
    B = n * means.var(ddof=1)
    Wv = x.var(axis=1, ddof=1).mean()
    if Wv == 0:
        return 1.0 if B == 0 else np.inf
    var_plus = (n - 1) / n * Wv + B / n
    return float(np.sqrt(var_plus / Wv))


def _rank_normalize(x):
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def split_rhat(x) -> float:
    """Rank-normalized split-chain R-hat (max of bulk and folded tail).

    ``x`` has shape (chains, draws).
    """
    s = _split(x)
    bulk = _rhat_basic(_rank_normalize(s))
    med = np.median(s)
    tail = _rhat_basic(_rank_normalize(np.abs(s - med)))
    return max(bulk, tail)


def _autocov(x):
    n = len(x)
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    ac = np.fft.irfft(f * np.conj(f), size)[:n]
    return ac / n


def ess(x) -> float:
    """Effective sample size with Geyer's initial monotone sequence.

    ``x`` has shape (chains, draws); chains are split in half first.
    """
    s = _split(x)
    m, n = s.shape
    if n < 4:
        return float(m * n)
    acov = np.array([_autocov(c) for c in s])
    chain_var = acov[:, 0] * n / (n - 1)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += s.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = 1 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative pair, made monotone
    pairs = rho[:-1:2] + rho[1::2]
    stop = np.argmax(pairs < 0) if np.any(pairs < 0) else len(pairs)
    pairs = np.minimum.accumulate(pairs[:stop])
    tau = -1 + 2 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def mcse(x) -> float:
    x = np.asarray(x, float)
    return float(x.reshape(-1).std(ddof=1) / np.sqrt(ess(x)))
