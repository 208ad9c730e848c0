import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import random_sequence
from remeta.core import EventSequence
from remeta.errors import NumericalError, UserError
from remeta.estimate import fit_rem
from remeta.multilevel import (
    SIGMA_FLOOR, ClusterFit, fit_clusters, fit_random_effects_freq, floor_pd, joint_loglik,
    mse_study, shrinkage_report,
)
from remeta.stats import StatisticSpec


def random_fits(rng, K, P, spread=1.0, noise=0.1):
    fits = []
    for k in range(K):
        A = rng.normal(size=(P, P))
        om = noise * (A @ A.T / P + 0.2 * np.eye(P))
        fits.append(ClusterFit(k, rng.normal(0, spread, P), om, 100 + k))
    return fits


def quiet_freq(fits, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit_random_effects_freq(fits, **kw)


class TestFrequentist:
    def test_tiny_error_recovers_sample_moments(self):
        fits = [ClusterFit(k, [b], [[1e-6]], 50) for k, b in enumerate([-1.0, 0.0, 1.0])]
        est = fit_random_effects_freq(fits)
        assert est.converged
        assert est.mu[0] == pytest.approx(0.0, abs=1e-10)
        assert est.sigma[0, 0] == pytest.approx(2 / 3, rel=1e-4)
        np.testing.assert_allclose(est.cluster_effects[:, 0], [-1, 0, 1], atol=1e-5)

    @pytest.mark.parametrize("omega,s", [(0.05, 1.0), (0.1, 0.5), (0.2, 2.0)])
    def test_scalar_fixed_point(self, omega, s):
        # equal errors: mu = mean, and sigma solves (sigma + omega)^2 = sigma * s
        b = np.sqrt(s) * np.array([-1.0, 1.0])
        fits = [ClusterFit(k, [x], [[omega]], 10) for k, x in enumerate(b)]
        est = fit_random_effects_freq(fits, tol=1e-12, max_sweeps=100_000)
        root = (s - 2 * omega + np.sqrt(s * s - 4 * s * omega)) / 2
        assert est.mu[0] == pytest.approx(0.0, abs=1e-12)
        assert est.sigma[0, 0] == pytest.approx(root, rel=1e-6)

    def test_scalar_collapse_below_threshold(self):
        # s < 4 omega: no positive root, the estimate goes to the floor
        fits = [ClusterFit(k, [x], [[1.0]], 10) for k, x in enumerate([-0.5, 0.5])]
        with pytest.warns(RuntimeWarning, match="floor"):
            est = fit_random_effects_freq(fits, max_sweeps=100_000)
        assert est.boundary
        assert est.sigma[0, 0] < 1e-6

    def test_identical_fits_hit_floor(self, rng):
        f = random_fits(rng, 1, 3)[0]
        fits = [ClusterFit(k, f.theta_hat, f.omega_hat, 10) for k in range(2)]
        with pytest.warns(RuntimeWarning, match="positive-definite floor"):
            est = fit_random_effects_freq(fits)
        np.testing.assert_allclose(est.mu, f.theta_hat, atol=1e-12)
        np.testing.assert_allclose(est.delta, 0.0, atol=1e-8)
        assert est.boundary
        assert np.linalg.eigvalsh(est.sigma).min() >= SIGMA_FLOOR * (1 - 1e-6)

    def test_one_cluster_rejected(self, rng):
        with pytest.raises(UserError, match="K=1"):
            fit_random_effects_freq(random_fits(rng, 1, 2))

    def test_fixed_effects_rejected(self, rng):
        fits = [ClusterFit(k, f.theta_hat, f.omega_hat, 10, n_fixed=1)
                for k, f in enumerate(random_fits(rng, 3, 2))]
        with pytest.raises(UserError, match="F=0"):
            fit_random_effects_freq(fits)

    def test_non_pd_covariance(self, rng):
        fits = random_fits(rng, 3, 2)
        fits[1].omega_hat[:] = [[1.0, 2.0], [2.0, 1.0]]
        with pytest.raises(NumericalError, match="cluster 1"):
            fit_random_effects_freq(fits)

    @given(seed=st.integers(0, 2**32 - 1), K=st.integers(3, 12), P=st.integers(1, 4))
    @settings(max_examples=30, deadline=None)
    def test_monotone_and_centered(self, seed, K, P):
        rng = np.random.default_rng(seed)
        est = quiet_freq(random_fits(rng, K, P), max_sweeps=2000)
        assert est.monotone_violations == 0
        if K <= P:
            assert est.boundary
        if not est.boundary:
            ll = np.array(est.loglik)
            assert np.all(np.diff(ll) >= -1e-9 * np.maximum(1, np.abs(ll[1:])))
        if est.converged:
            # the mu and delta equations force sum_k delta_k = 0; the stopping
            # rule bounds the step, not the distance, so allow slow contraction
            np.testing.assert_allclose(est.delta.mean(axis=0), 0.0, atol=1e-5)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_fixed_point_is_gls(self, seed):
        rng = np.random.default_rng(seed)
        fits = random_fits(rng, 8, 2, noise=0.05)
        est = quiet_freq(fits, tol=1e-12, max_sweeps=100_000)
        if not est.converged or est.boundary:
            return
        V = [np.linalg.inv(f.omega_hat + est.sigma) for f in fits]
        gls = np.linalg.solve(sum(V), sum(v @ f.beta_hat for v, f in zip(V, fits)))
        np.testing.assert_allclose(est.mu, gls, atol=1e-8)
        np.testing.assert_allclose(est.mu_cov, np.linalg.inv(sum(V)), rtol=1e-10)

    def test_marginal_weights_variant(self, rng):
        fits = random_fits(rng, 10, 2, noise=0.05)
        est = quiet_freq(fits, marginal_weights=True, tol=1e-12, max_sweeps=100_000)
        V = [np.linalg.inv(f.omega_hat + est.sigma) for f in fits]
        gls = np.linalg.solve(sum(V), sum(v @ f.beta_hat for v, f in zip(V, fits)))
        np.testing.assert_allclose(est.mu, gls, atol=1e-8)

    def test_order_invariance(self, rng):
        fits = random_fits(rng, 6, 3)
        a = quiet_freq(fits, tol=1e-12)
        perm = [3, 0, 5, 1, 4, 2]
        b = quiet_freq([fits[i] for i in perm], tol=1e-12)
        np.testing.assert_allclose(a.mu, b.mu, atol=1e-9)
        np.testing.assert_allclose(a.sigma, b.sigma, atol=1e-9)
        np.testing.assert_allclose(a.delta[perm], b.delta, atol=1e-9)

    def test_joint_loglik_by_hand(self):
        B = np.array([[1.0], [3.0]])
        W = np.array([[[2.0]], [[2.0]]])
        val = joint_loglik(B, W, np.array([2.0]), np.array([[-0.5], [0.5]]), np.array([[0.25]]))
        # fit term: 2*(0.5^2)*2/2 = 0.5; logdet: 2*log(0.25)/2; quad: 2*(0.25/0.25)/2
        assert val == pytest.approx(-0.5 - np.log(0.25) - 1.0)

    def test_floor_pd(self):
        S, hit = floor_pd(np.array([[1.0, 1.0], [1.0, 1.0]]))
        assert hit and np.linalg.eigvalsh(S).min() == pytest.approx(SIGMA_FLOOR)
        S2, hit2 = floor_pd(np.eye(2))
        assert not hit2 and np.array_equal(S2, np.eye(2))

    def test_json(self, rng):
        d = json.loads(quiet_freq(random_fits(rng, 4, 2)).to_json())
        assert set(d) >= {"mu", "mu_se", "sigma", "delta", "sweeps", "converged"}


class TestShrinkage:
    def test_limits(self, rng):
        # near-exact clusters are not moved; very noisy ones collapse onto mu
        fits = random_fits(rng, 5, 2, spread=1.0)
        for k, f in enumerate(fits):
            f.omega_hat[:] = np.eye(2) * (1e-8 if k < 3 else 1e4)
        est = quiet_freq(fits)
        rep = shrinkage_report(fits, est)
        np.testing.assert_allclose(rep.shrinkage[:3], 0.0, atol=1e-5)
        np.testing.assert_allclose(est.cluster_effects[3:], np.tile(est.mu, (2, 1)), atol=1e-3)

    def test_shrinkage_falls_with_size(self):
        rng = np.random.default_rng(3)
        sizes = np.repeat([50, 500, 5000], 8)
        fits = []
        for k, m in enumerate(sizes):
            b = rng.normal(0, 0.5, 2)
            om = np.eye(2) * 5.0 / m
            fits.append(ClusterFit(k, rng.multivariate_normal(b, om), om, int(m)))
        est = quiet_freq(fits)
        rep = shrinkage_report(fits, est)
        for rho, p in rep.size_correlation().values():
            assert rho < 0 and p < 0.05
        assert len(list(rep.rows())) == 48

    def test_mismatched_clusters(self, rng):
        fits = random_fits(rng, 3, 1)
        est = quiet_freq(fits)
        with pytest.raises(UserError, match="different clusters"):
            shrinkage_report(fits[::-1], est)

    def test_mse_study(self, rng):
        fits = random_fits(rng, 4, 2)
        est = quiet_freq(fits)
        truth = {f.cluster_id: f.beta_hat for f in fits}
        out = mse_study(truth, fits, est)
        assert out["x1"]["mse_mle"] == 0.0
        assert out["x1"]["mse_multilevel"] >= 0.0


class TestClusterFits:
    SPECS = [StatisticSpec("intercept"), StatisticSpec("inertia")]

    def seqs(self, rng, sizes):
        return [EventSequence.from_events(random_sequence(rng, 4, m), 4) for m in sizes]

    def test_matches_single_fits(self, rng):
        seqs = self.seqs(rng, [60, 80, 100])
        fits = fit_clusters(seqs, self.SPECS)
        for f, s in zip(fits, seqs):
            np.testing.assert_array_equal(f.beta_hat, fit_rem(s, self.SPECS).beta)
        assert [f.n_events for f in fits] == [60, 80, 100]

    def test_excludes_small_cluster(self, rng):
        seqs = dict(zip("abc", self.seqs(rng, [60, 1, 70])))
        with pytest.warns(RuntimeWarning, match="cluster b excluded"):
            fits = fit_clusters(seqs, self.SPECS)
        assert [f.cluster_id for f in fits] == ["a", "c"]
        assert "b" in fits.excluded

    def test_fixed_reorders(self, rng):
        seqs = self.seqs(rng, [60, 70])
        fits = fit_clusters(seqs, self.SPECS, fixed=["inertia"])
        assert fits[0].F == 1 and fits[0].names == ["inertia", "intercept"]
        direct = fit_rem(seqs[0], self.SPECS)
        np.testing.assert_array_equal(fits[0].theta_hat, direct.beta[::-1])
        np.testing.assert_array_equal(fits[0].block("21"), direct.omega[[0], :][:, [1]])

    def test_unknown_fixed(self, rng):
        with pytest.raises(UserError, match="unknown column"):
            fit_clusters(self.seqs(rng, [30, 30]), self.SPECS, fixed=["nope"])

    def test_needs_two(self, rng):
        with pytest.raises(UserError, match="at least 2"):
            fit_clusters(self.seqs(rng, [30]), self.SPECS)
