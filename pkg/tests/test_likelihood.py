import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import (
    finite_difference_gradient, finite_difference_hessian, loglik_temporal_direct,
    random_sequence,
)
from remeta.core import EventSequence
from remeta.errors import RateOverflowError, UserError
from remeta.likelihood import (
    design_from_slices, loglik_ordinal, loglik_temporal, make_design, poisson_expand,
    poisson_loglik, write_poisson_csv,
)
from remeta.stats import StatisticSpec, build_covariates

NET = [StatisticSpec(k) for k in ("inertia", "reciprocity", "otp", "ps_AB_BA", "rrank_send")]


def instance(rng, n=4, m=10, specs=None, tail=0.0, intercept=True):
    events = random_sequence(rng, n, m)
    end = events[-1][0] + tail
    seq = EventSequence.from_events(events, n, end_time=end)
    specs = ([StatisticSpec("intercept")] if intercept else []) + list(specs or NET)
    return seq, specs, make_design(seq, specs)


class TestTemporal:
    def test_intercept_only_stationary_point(self, rng):
        seq = EventSequence.from_events(random_sequence(rng, 3, 4), 3)
        design = make_design(seq, [StatisticSpec("intercept")])
        grid = np.linspace(-6, 3, 90001)
        vals = [loglik_temporal(design, [b]).value for b in grid[::100]]
        coarse = grid[::100][int(np.argmax(vals))]
        fine = np.linspace(coarse - 0.02, coarse + 0.02, 4001)
        best = fine[int(np.argmax([loglik_temporal(design, [b]).value for b in fine]))]
        closed = np.log(4 / (6 * seq.times[-1]))
        assert abs(best - closed) < 2e-5
        assert abs(loglik_temporal(design, [closed]).gradient[0]) < 1e-12

    def test_beta_zero_value(self, rng):
        seq, specs, design = instance(rng, tail=2.5)
        val = loglik_temporal(design, np.zeros(len(specs))).value
        assert val == pytest.approx(-(seq.end_time - seq.onset) * 12, rel=1e-12)

    def test_matches_direct_double_loop(self, rng):
        seq, specs, design = instance(rng, n=3, m=6, tail=1.0)
        beta = rng.normal(0, 0.3, len(specs))
        direct = loglik_temporal_direct(design.X, design.observed, design.dt, beta,
                                        design.X_end, design.dt_end)
        assert loglik_temporal(design, beta).value == pytest.approx(direct, rel=1e-12)

    def test_terminal_term_optional(self, rng):
        _, specs, design = instance(rng, tail=3.0)
        beta = np.zeros(len(specs))
        with_t = loglik_temporal(design, beta).value
        without = loglik_temporal(design, beta, terminal=False).value
        assert with_t - without == pytest.approx(-3.0 * 12)

    def test_finite_differences(self, rng):
        _, specs, design = instance(rng, n=3, m=5, tail=0.5)
        beta = rng.normal(0, 0.3, len(specs))
        ev = loglik_temporal(design, beta)
        g = finite_difference_gradient(lambda b: loglik_temporal(design, b).value, beta)
        H = finite_difference_hessian(lambda b: loglik_temporal(design, b).gradient, beta)
        np.testing.assert_allclose(ev.gradient, g, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(ev.hessian, H, rtol=1e-4, atol=1e-6)
        np.testing.assert_allclose(ev.hessian, ev.hessian.T, rtol=1e-10, atol=0)
        assert np.linalg.eigvalsh(ev.hessian).max() <= 1e-10

    def test_overflow_names_dyad(self, rng):
        _, specs, design = instance(rng, m=12)
        beta = np.zeros(len(specs))
        beta[1] = 800.0
        with pytest.raises(RateOverflowError, match="dyad"):
            loglik_temporal(design, beta)

    def test_streamed_equals_materialized(self, rng):
        seq, specs, design = instance(rng, m=40, tail=1.0)
        lazy = make_design(seq, specs, materialize=False)
        beta = rng.normal(0, 0.2, len(specs))
        a, b = loglik_temporal(design, beta), loglik_temporal(lazy, beta)
        assert a.value == pytest.approx(b.value, rel=1e-13)
        np.testing.assert_allclose(a.hessian, b.hessian, rtol=1e-12)

    def test_design_from_slices(self, rng):
        seq, specs, design = instance(rng, m=8)
        alt = design_from_slices(seq, build_covariates(seq, specs), design.names)
        beta = rng.normal(0, 0.2, len(specs))
        assert loglik_temporal(alt, beta).value == pytest.approx(
            loglik_temporal(design, beta).value, rel=1e-14)


class TestOrdinal:
    def test_beta_zero(self, rng):
        _, specs, design = instance(rng, m=9, intercept=False)
        val = loglik_ordinal(design, np.zeros(len(specs))).value
        assert val == pytest.approx(-9 * np.log(12))

    def test_constant_column_is_ignored(self, rng):
        seq = EventSequence.from_events(random_sequence(rng, 4, 7), 4)
        design = make_design(seq, [StatisticSpec("indegree_sender", name="c")])
        const = design.X.copy()
        const[:] = 3.0
        design.X[:] = const
        for b in (-2.0, 0.0, 1.7):
            assert loglik_ordinal(design, [b]).value == pytest.approx(-7 * np.log(12))
            assert abs(loglik_ordinal(design, [b]).hessian[0, 0]) < 1e-10

    def test_intercept_rejected(self, rng):
        _, specs, design = instance(rng)
        with pytest.raises(UserError, match="intercept unidentified in ordinal model"):
            loglik_ordinal(design, np.zeros(len(specs)))

    def test_finite_differences(self, rng):
        _, specs, design = instance(rng, n=3, m=5, intercept=False)
        beta = rng.normal(0, 0.5, len(specs))
        ev = loglik_ordinal(design, beta)
        g = finite_difference_gradient(lambda b: loglik_ordinal(design, b).value, beta)
        H = finite_difference_hessian(lambda b: loglik_ordinal(design, b).gradient, beta)
        np.testing.assert_allclose(ev.gradient, g, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(ev.hessian, H, rtol=1e-4, atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), c=st.floats(-5, 5), col=st.integers(0, 4))
    def test_translation_invariance_and_concavity(self, seed, c, col):
        rng = np.random.default_rng(seed)
        _, specs, design = instance(rng, n=4, m=8, intercept=False)
        beta = rng.normal(0, 0.5, len(specs))
        before = loglik_ordinal(design, beta)
        m = int(rng.integers(design.n_events))
        design.X[m, :, col] += c
        after = loglik_ordinal(design, beta)
        assert after.value == pytest.approx(before.value, rel=1e-10, abs=1e-10)
        assert np.linalg.eigvalsh(after.hessian).max() <= 1e-9


class TestPoisson:
    def test_row_counts(self, rng):
        _, _, design = instance(rng, n=3, m=3, tail=1.0)
        rows = list(poisson_expand(design))
        assert len(rows) == 18 + 6
        assert sum(r.y for r in rows) == 3
        _, _, flush = instance(rng, n=3, m=3)
        assert len(list(poisson_expand(flush))) == 18

    def test_equivalence_with_temporal(self, rng):
        _, specs, design = instance(rng, n=4, m=10, tail=0.7)
        for _ in range(5):
            beta = rng.normal(0, 0.3, len(specs))
            a = loglik_temporal(design, beta)
            b = poisson_loglik(poisson_expand(design), beta)
            assert b.value == pytest.approx(a.value, abs=1e-10)
            np.testing.assert_allclose(b.gradient, a.gradient, atol=1e-8)
            np.testing.assert_allclose(b.hessian, a.hessian, rtol=1e-10, atol=1e-10)

    def test_zero_waiting_time_rejected(self, rng):
        _, _, design = instance(rng, m=4)
        design.dt[2] = 0.0
        with pytest.raises(UserError, match="waiting time"):
            list(poisson_expand(design))

    def test_csv_dump(self, rng, tmp_path):
        _, _, design = instance(rng, n=3, m=2)
        n = write_poisson_csv(poisson_expand(design), tmp_path / "rows.csv", design.names)
        lines = (tmp_path / "rows.csv").read_text().splitlines()
        assert n == 12 and len(lines) == 13
        assert lines[0].startswith("event,dyad,y,offset,intercept,inertia")
