import numpy as np
import pytest

from oracles import finite_difference_hessian, random_sequence
from remeta.core import ActorAttributes, EventSequence
from remeta.errors import RankDeficientError
from remeta.estimate import FitOptions, FitResult, fit_design, fit_rem, profile_fit
from remeta.likelihood import loglik_temporal, make_design
from remeta.stats import StatisticSpec

NET = [StatisticSpec("intercept"), StatisticSpec("inertia"), StatisticSpec("reciprocity"),
       StatisticSpec("ps_AB_BA"), StatisticSpec("osp")]


def intercept_only_fit(rng, n_events, n_actors=3):
    seq = EventSequence.from_events(random_sequence(rng, n_actors, n_events), n_actors)
    return seq, fit_rem(seq, [StatisticSpec("intercept")])


class TestFitRem:
    def test_intercept_closed_form(self, rng):
        seq, fit = intercept_only_fit(rng, 40)
        closed = np.log(40 / (6 * seq.times[-1]))
        assert fit.converged
        assert abs(fit.beta[0] - closed) < 1e-8
        # observed information of the intercept is M at the optimum
        assert fit.omega[0, 0] == pytest.approx(1 / 40, rel=1e-8)

    def test_duplicate_column_is_rank_deficient(self, rng):
        seq = EventSequence.from_events(random_sequence(rng, 4, 30), 4)
        specs = [StatisticSpec("intercept"), StatisticSpec("inertia"),
                 StatisticSpec("inertia", name="inertia2")]
        with pytest.raises(RankDeficientError, match="rank-deficient design.*inertia"):
            fit_rem(seq, specs)

    def test_gradient_small_and_omega_matches_fd(self, rng):
        seq = EventSequence.from_events(random_sequence(rng, 4, 60), 4)
        fit = fit_rem(seq, NET)
        assert fit.converged and fit.grad_norm < 1e-8
        design = make_design(seq, NET)
        H = finite_difference_hessian(lambda b: loglik_temporal(design, b).gradient, fit.beta)
        np.testing.assert_allclose(fit.omega, np.linalg.inv(-H), rtol=1e-3)
        np.testing.assert_allclose(fit.omega, fit.omega.T)
        assert np.linalg.eigvalsh(fit.omega).min() > 0

    def test_constant_column_dropped_with_infinite_variance(self, rng):
        # one department only: same_attribute duplicates the intercept
        seq = EventSequence.from_events(random_sequence(rng, 4, 40), 4)
        attrs = ActorAttributes(4, {"dept": np.array(["a"] * 4, dtype=object)})
        specs = [StatisticSpec("intercept"), StatisticSpec("inertia"),
                 StatisticSpec("same_attribute", ("dept",), name="same")]
        fit = fit_rem(seq, specs, attrs)
        assert fit.converged
        assert fit.dropped == ["same"]
        assert fit.beta[2] == 0.0 and np.isinf(fit.omega[2, 2])
        assert fit.omega[2, 0] == 0.0

    def test_ordinal(self, rng):
        seq = EventSequence.from_events(random_sequence(rng, 4, 80), 4)
        fit = fit_rem(seq, NET[1:], kind="ordinal")
        assert fit.converged and fit.kind == "ordinal"

    def test_streamed_matches_materialized(self, rng):
        seq = EventSequence.from_events(random_sequence(rng, 4, 50), 4)
        a = fit_rem(seq, NET)
        b = fit_rem(seq, NET, options=FitOptions(materialize=False))
        np.testing.assert_allclose(a.beta, b.beta, rtol=1e-10, atol=1e-12)

    def test_invariant_to_risk_set_order(self, rng):
        seq = EventSequence.from_events(random_sequence(rng, 4, 50), 4)
        design = make_design(seq, NET)
        perm = rng.permutation(design.n_dyads)
        inv = np.argsort(perm)
        design2 = make_design(seq, NET)
        design2.X = design.X[:, perm]
        design2.X_end = design.X_end[perm]
        design2.observed = inv[design.observed]
        a, b = fit_design(design), fit_design(design2)
        np.testing.assert_allclose(a.beta, b.beta, rtol=1e-9, atol=1e-12)

    def test_separation_reports_nonconvergence(self):
        # strict turn taking: the reply indicator is 1 exactly on each observed dyad
        seq = EventSequence.from_events(
            [(float(t), t % 2, 1 - t % 2) for t in range(1, 30)], 3)
        fit = fit_rem(seq, [StatisticSpec("ps_AB_BA")], kind="ordinal",
                      options=FitOptions(max_iter=30))
        assert not fit.converged
        assert fit.message

    def test_json_roundtrip(self, rng):
        seq = EventSequence.from_events(random_sequence(rng, 4, 40), 4)
        fit = fit_rem(seq, NET)
        back = FitResult.from_json(fit.to_json())
        np.testing.assert_array_equal(back.beta, fit.beta)
        np.testing.assert_array_equal(back.omega, fit.omega)
        assert back.spec_hash == fit.spec_hash != ""


class TestProfile:
    def test_deterministic(self, rng):
        seq = EventSequence.from_events(random_sequence(rng, 4, 60), 4)
        a, b = profile_fit(seq, NET), profile_fit(seq, NET)
        np.testing.assert_array_equal(a.fit.beta, b.fit.beta)
        assert a.iterations == b.iterations

    def test_time_grows_with_m(self, rng):
        events = random_sequence(rng, 5, 1600)
        short = EventSequence.from_events(events[:400], 5)
        long = EventSequence.from_events(events, 5)
        t_short = min(profile_fit(short, NET).wall_time for _ in range(3))
        t_long = min(profile_fit(long, NET).wall_time for _ in range(3))
        assert t_long > t_short

    def test_streamed_memory_is_flat(self, rng):
        events = random_sequence(rng, 5, 2500)
        opts = FitOptions(materialize=False)
        small = profile_fit(EventSequence.from_events(events[:250], 5), NET, options=opts)
        big = profile_fit(EventSequence.from_events(events, 5), NET, options=opts)
        assert big.peak_memory < 1.5 * small.peak_memory + 50_000
        mat = profile_fit(EventSequence.from_events(events, 5), NET)
        assert mat.peak_memory > 3 * big.peak_memory
