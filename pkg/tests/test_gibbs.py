import csv

import numpy as np
import pytest
from scipy import integrate, stats

from remeta.errors import NumericalError, UserError
from remeta.gibbs import (
    GibbsConfig, correlations, ess, gibbs_mixed, sample_inverse_gamma, sample_inverse_wishart,
    sample_prior, split_rhat,
)
from remeta.multilevel import ClusterFit

SMALL = dict(iterations=1500, burn_in=500, chains=2)


def scalar_fits(rng, K=8, mu=0.5, sd=0.6):
    om = rng.uniform(0.05, 0.4, K)
    b = rng.normal(mu, sd, K) + rng.normal(0, np.sqrt(om))
    return [ClusterFit(k, [b[k]], [[om[k]]], 100) for k in range(K)], b, om


def quadrature_posterior(b, om, eta=2.0, d=1e5):
    """Posterior means of mu and sigma^2 for P=1 by integrating over sigma.

    With one random effect the prior on sigma is half-t(eta, d); mu has a
    flat prior and is integrated out analytically.
    """
    def parts(s):
        v = om + s * s
        w = 1 / v
        m = np.sum(w * b) / w.sum()
        logl = (-0.5 * np.sum(np.log(v)) - 0.5 * np.log(w.sum())
                - 0.5 * np.sum(w * (b - m) ** 2))
        logp = -(eta + 1) / 2 * np.log1p(s * s / (eta * d * d))
        return np.exp(logl + logp), m

    upper = 50 * (np.std(b) + np.sqrt(om.max()))
    Z = integrate.quad(lambda s: parts(s)[0], 0, upper, limit=400)[0]
    mu = integrate.quad(lambda s: parts(s)[0] * parts(s)[1], 0, upper, limit=400)[0] / Z
    s2 = integrate.quad(lambda s: parts(s)[0] * s * s, 0, upper, limit=400)[0] / Z
    return mu, s2


class TestSamplers:
    def test_inverse_gamma(self):
        rng = np.random.default_rng(1)
        x = sample_inverse_gamma(rng, 3.0, np.full(20_000, 2.0))
        assert stats.kstest(x, stats.invgamma(3.0, scale=2.0).cdf).pvalue > 0.01
        assert x.mean() == pytest.approx(1.0, rel=0.03)

    def test_inverse_wishart_moments(self):
        rng = np.random.default_rng(2)
        psi = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 0.5]])
        nu, p = 15, 3
        draws = np.array([sample_inverse_wishart(rng, nu, psi) for _ in range(20_000)])
        np.testing.assert_allclose(draws.mean(0), stats.invwishart(nu, psi).mean(),
                                   rtol=0.02, atol=0.002)
        d = np.diag(psi)
        var = (((nu - p + 1) * psi ** 2 + (nu - p - 1) * np.outer(d, d))
               / ((nu - p) * (nu - p - 1) ** 2 * (nu - p - 3)))
        np.testing.assert_allclose(draws.var(0), var, rtol=0.1)
        # each diagonal element is inverse-gamma
        ig = stats.invgamma((nu - p + 1) / 2, scale=psi[0, 0] / 2)
        assert stats.kstest(draws[:, 0, 0], ig.cdf).pvalue > 0.01

    def test_inverse_wishart_df_guard(self):
        with pytest.raises(UserError, match="df > P - 1"):
            sample_inverse_wishart(np.random.default_rng(0), 1.5, np.eye(3))

    def test_prior_correlations_uniform(self):
        sig, alpha = sample_prior(GibbsConfig(eta=2.0, seed=4), 3, 5000)
        r = correlations(sig).ravel()
        assert stats.kstest(r, stats.uniform(-1, 2).cdf).pvalue > 0.01
        assert np.all(alpha > 0)

    def test_prior_correlations_not_uniform_for_large_eta(self):
        # larger eta concentrates correlations at zero
        sig, _ = sample_prior(GibbsConfig(eta=20.0, seed=4), 3, 5000)
        r = correlations(sig).ravel()
        assert stats.kstest(r, stats.uniform(-1, 2).cdf).pvalue < 1e-6


class TestDiagnostics:
    def test_iid_chains(self):
        x = np.random.default_rng(5).normal(size=(4, 2000))
        assert split_rhat(x) < 1.01
        assert ess(x) == pytest.approx(8000, rel=0.15)

    def test_ar1_ess(self):
        rng = np.random.default_rng(6)
        phi, n = 0.9, 20_000
        x = np.empty((4, n))
        x[:, 0] = rng.normal(size=4) / np.sqrt(1 - phi ** 2)
        for t in range(1, n):
            x[:, t] = phi * x[:, t - 1] + rng.normal(size=4)
        expected = 4 * n * (1 - phi) / (1 + phi)
        assert ess(x) == pytest.approx(expected, rel=0.2)

    def test_shifted_chain_flagged(self):
        x = np.random.default_rng(7).normal(size=(4, 1000))
        x[0] += 1.0
        assert split_rhat(x) > 1.05

    def test_trend_flagged_by_split(self):
        x = np.random.default_rng(8).normal(size=(1, 2000)) + np.linspace(0, 3, 2000)
        assert split_rhat(x) > 1.1


class TestGibbs:
    def test_matches_quadrature(self):
        fits, b, om = scalar_fits(np.random.default_rng(11))
        ch = gibbs_mixed(fits, GibbsConfig(seed=1))
        mu_ref, s2_ref = quadrature_posterior(b, om)
        s = ch.summary()
        m = s["mu[x1]"]
        assert abs(m["mean"] - mu_ref) < 4 * m["mcse"]
        v = s["Sigma[x1,x1]"]
        assert abs(v["mean"] - s2_ref) < 4 * v["mcse"]

    def test_literal_cycle_same_target(self):
        fits, b, om = scalar_fits(np.random.default_rng(12))
        mu_ref, _ = quadrature_posterior(b, om)
        ch = gibbs_mixed(fits, GibbsConfig(seed=2, interweave=False))
        m = ch.summary()["mu[x1]"]
        assert abs(m["mean"] - mu_ref) < 4 * m["mcse"]

    def test_fixed_block_pools_by_precision(self):
        # block-diagonal errors: psi's conditional ignores the random part
        rng = np.random.default_rng(13)
        fits = []
        for k in range(6):
            o11, o22 = rng.uniform(0.02, 0.1), rng.uniform(0.05, 0.2)
            theta = [0.3 + rng.normal(0, np.sqrt(o11)), rng.normal(-0.2, 0.4)]
            fits.append(ClusterFit(k, theta, np.diag([o11, o22]), 50, ["f", "r"], n_fixed=1))
        ch = gibbs_mixed(fits, GibbsConfig(seed=3))
        w = np.array([1 / f.omega_hat[0, 0] for f in fits])
        pooled = np.sum(w * [f.theta_hat[0] for f in fits]) / w.sum()
        s = ch.summary()["psi[f]"]
        assert abs(s["mean"] - pooled) < 4 * s["mcse"]
        assert s["sd"] == pytest.approx(np.sqrt(1 / w.sum()), rel=0.05)

    def test_deterministic(self):
        fits, *_ = scalar_fits(np.random.default_rng(14))
        a = gibbs_mixed(fits, GibbsConfig(seed=5, **SMALL))
        b = gibbs_mixed(fits, GibbsConfig(seed=5, **SMALL))
        c = gibbs_mixed(fits, GibbsConfig(seed=6, **SMALL))
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.sigma, b.sigma)
        assert not np.array_equal(a.mu, c.mu)

    def test_sigma_draws_pd_and_shapes(self):
        rng = np.random.default_rng(15)
        fits = []
        for k in range(6):
            A = rng.normal(size=(3, 3))
            fits.append(ClusterFit(k, rng.normal(size=3), 0.1 * (A @ A.T + np.eye(3)), 40))
        ch = gibbs_mixed(fits, GibbsConfig(seed=7, **SMALL))
        assert ch.sigma.shape == (2, 1000, 3, 3) and ch.delta.shape == (2, 1000, 6, 3)
        flat = ch.flat("sigma")
        np.testing.assert_array_equal(flat, np.swapaxes(flat, 1, 2))
        assert np.linalg.eigvalsh(flat).min() > 0

    def test_thinning(self):
        fits, *_ = scalar_fits(np.random.default_rng(16))
        ch = gibbs_mixed(fits, GibbsConfig(seed=8, iterations=1000, burn_in=100, thin=3, chains=1))
        assert ch.mu.shape == (1, 300, 1)

    def test_nan_aborts(self, monkeypatch):
        import remeta.gibbs as g
        fits, *_ = scalar_fits(np.random.default_rng(17))
        monkeypatch.setattr(g, "sample_inverse_gamma", lambda rng, a, b: np.full(np.shape(b), np.nan))
        with pytest.raises(NumericalError, match="non-finite draw at iteration 0"):
            gibbs_mixed(fits, GibbsConfig(**SMALL))

    def test_non_pd_cluster_named(self):
        fits, *_ = scalar_fits(np.random.default_rng(18), K=3)
        bad = ClusterFit("k9", [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], 30, n_fixed=1)
        ok = [ClusterFit(k, [0.1, 0.2], np.eye(2), 30, n_fixed=1) for k in range(2)]
        with pytest.raises(NumericalError, match="cluster k9"):
            gibbs_mixed(ok + [bad], GibbsConfig(**SMALL))

    def test_input_checks(self):
        with pytest.raises(UserError, match="at least 2"):
            gibbs_mixed([ClusterFit(0, [0.0], [[1.0]], 5)])
        mixed = [ClusterFit(0, [0.0, 0.0], np.eye(2), 5, n_fixed=1),
                 ClusterFit(1, [0.0, 0.0], np.eye(2), 5)]
        with pytest.raises(UserError, match="fixed/random split"):
            gibbs_mixed(mixed)

    @pytest.mark.parametrize("kw", [dict(iterations=10, burn_in=10), dict(eta=0.0),
                                    dict(d=-1.0), dict(thin=0)])
    def test_config_validation(self, kw):
        with pytest.raises(UserError):
            GibbsConfig(**kw)

    def test_write_draws(self, tmp_path):
        fits, *_ = scalar_fits(np.random.default_rng(19), K=3)
        ch = gibbs_mixed(fits, GibbsConfig(seed=9, iterations=60, burn_in=10, chains=2))
        n = ch.write_draws(tmp_path / "d.csv")
        with open(tmp_path / "d.csv") as fh:
            rows = list(csv.reader(fh))
        assert n == 100 and len(rows) == 101
        assert rows[0][:3] == ["chain", "draw", "mu[x1]"]
        assert float(rows[1][2]) == ch.mu[0, 0, 0]
