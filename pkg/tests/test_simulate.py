import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqmt.calibrate import ClassSpec, conservative_thresholds
from seqmt.errors import ResourceError, ValidationError
from seqmt.model import EMPTY, HypothesisFamily, Problem, SignalConfig
from seqmt.rules import Gap, Intersection, SumIntersection
from seqmt.simulate import (BLOCK_SIZE, Event, ISProposal, default_proposal, estimate_error_is, estimate_error_mc,
                            estimate_ess, max_error_over_family, simulate_paths, wilson_interval)

S = SignalConfig.from_indices
DET = Problem.deterministic(2, -0.5, 0.5)


class TestEvents:
    @pytest.mark.parametrize("text,kind,param", [("gmr(2)", "gmr", 2), (" gfwer_fp ( 1 ) ", "gfwer_fp", 1),
                                                 ("fdp_mean", "fdp_mean", None), ("wrong_decision", "wrong_decision", None)])
    def test_parse(self, text, kind, param):
        e = Event.parse(text)
        assert (e.kind, e.param) == (kind, param)

    @pytest.mark.parametrize("bad", ["nope", "gmr", "gmr(0)", "fdp_mean(1)", "gmr(x)"])
    def test_parse_errors(self, bad):
        with pytest.raises(ValidationError):
            Event.parse(bad)

    def test_values(self):
        D = np.array([0b011, 0b000, 0b100])
        A = np.array([0b001, 0b011, 0b100])
        assert Event.parse("gmr(1)").values(D, A, 3).tolist() == [1, 1, 0]
        assert Event.parse("gfwer_fn(2)").values(D, A, 3).tolist() == [0, 1, 0]
        assert Event.parse("fdp_mean").values(D, A, 3).tolist() == [0.5, 0, 0]
        assert Event.parse("fnp_mean").values(D, A, 3).tolist() == [0, 2 / 3, 0]


class TestESS:
    def test_deterministic_exact(self):
        r = estimate_ess(Intersection(2, 2), DET, S([0, 1]), 500, 100, seed=1)
        assert r.ess_mean == 4 and r.ess_se == 0 and r.truncated_count == 0

    def test_horizon_one(self):
        r = estimate_ess(Intersection(5, 5), Problem.homogeneous_gaussian(2, 1.0), EMPTY, 300, 1)
        assert r.ess_mean == 1 and r.truncated_count == 300 and r.unreliable

    def test_wald_lower_bound(self):
        p = Problem.gaussian([1.0])
        b = 4.605
        r = estimate_ess(Intersection(b, b), p, S([0]), 20_000, seed=3)
        assert p.info[1][0] * r.ess_mean >= b - 4 * r.ess_se

    def test_wald_all_signal_slowest_stream(self):
        p = Problem.gaussian([1.0, 0.6, 1.4])
        b = 5.0
        r = estimate_ess(Intersection(b, b), p, S([0, 1, 2]), 20_000, seed=4)
        assert p.info[1].min() * r.ess_mean >= b - 4 * r.ess_se

    def test_ess_at_least_one(self):
        r = estimate_ess(SumIntersection(0.01), Problem.homogeneous_gaussian(3, 1.0), EMPTY, 1000)
        assert r.ess_mean >= 1


class TestErrorMC:
    def test_deterministic_is_zero_or_one(self):
        e = estimate_error_mc(Gap(3, 1), DET, S([0]), "wrong_decision", 200, 50)
        assert (e.estimate, e.se) == (0.0, 0.0)
        # Gap with m=1 under the empty truth ties forever, so it truncates and the forced decision is {0}
        e = estimate_error_mc(Gap(3, 1), DET, EMPTY, "wrong_decision", 200, 50)
        assert (e.estimate, e.se, e.truncated) == (1.0, 0.0, 200)

    def test_huge_thresholds_never_wrong(self):
        e = estimate_error_mc(Intersection(40, 40), Problem.homogeneous_gaussian(2, 1.0), S([1]),
                              "wrong_decision", 2000, 10_000, seed=2)
        assert e.estimate == 0 and e.truncated == 0

    def test_conservative_threshold_controls_gmr(self):
        b = conservative_thresholds(ClassSpec.gmr(1, 0.05), 2).b
        e = estimate_error_mc(SumIntersection(b, 1), Problem.homogeneous_gaussian(2, 1.0), EMPTY, "gmr(1)", 20_000)
        assert e.estimate <= 0.05 + 3 * e.se
        lo, hi = e.ci
        assert lo <= e.estimate <= hi

    def test_wilson(self):
        lo, hi = wilson_interval(0, 100)
        assert lo == 0 and 0 < hi < 0.05
        lo, hi = wilson_interval(50, 100)
        assert lo < 0.5 < hi and hi - 0.5 == pytest.approx(0.5 - lo)


class TestIS:
    p = Problem.homogeneous_gaussian(3, 1.0)

    def test_single_component_at_truth_has_unit_weights(self):
        batch = simulate_paths(SumIntersection(2.0), self.p, EMPTY, 3000, 500, 0, proposal=ISProposal.uniform([EMPTY]))
        assert np.all(batch.log_w == 0)

    def test_default_proposal_is_critical_set(self):
        prop = default_proposal(self.p, EMPTY, "gmr(1)")
        assert prop.configs == (S([0]), S([1]), S([2])) and prop.weights == pytest.approx((1 / 3,) * 3)
        fam = Problem.homogeneous_gaussian(4, 1.0, family=HypothesisFamily.fixed_size(4, 2))
        prop = default_proposal(fam, S([0, 1]), "wrong_decision")
        assert len(prop.configs) == 4 and all(len(c ^ S([0, 1])) == 2 for c in prop.configs)

    def test_weights_are_likelihood_ratios(self):
        # Under a single-component proposal at C the weight is exp(L_truth - L_C) at the stopping time.
        batch = simulate_paths(SumIntersection(2.0), self.p, EMPTY, 500, 500, 1, proposal=ISProposal.uniform([S([1])]))
        lam_stop = None  # recompute from a fresh run with the same substream
        from seqmt.simulate import _block_rng, run_paths
        rng = _block_rng(1, (), 0)
        rng.choice(1, size=500, p=[1.0])
        _, _, _, lam_stop = run_paths(SumIntersection(2.0), self.p, np.full(500, 0b010), 500, rng)
        assert np.allclose(batch.log_w, -lam_stop[:, 1])

    def test_agrees_with_crude_mc(self):
        rule = SumIntersection(3.0)
        mc = estimate_error_mc(rule, self.p, EMPTY, "gmr(1)", 40_000, seed=5)
        is_ = estimate_error_is(rule, self.p, EMPTY, "gmr(1)", None, 20_000, seed=6)
        assert mc.hits >= 50
        assert abs(is_.estimate - mc.estimate) <= 3 * math.hypot(is_.se, mc.se)
        assert is_.se < mc.se

    def test_rejects_ratio_events_and_deterministic(self):
        with pytest.raises(ValidationError):
            estimate_error_is(SumIntersection(2.0), self.p, EMPTY, "fdp_mean", None, 100)
        with pytest.raises(ValidationError):
            estimate_error_is(SumIntersection(2.0), DET, EMPTY, "gmr(1)", ISProposal.uniform([S([0])]), 100, 50)
        e = estimate_error_is(SumIntersection(2.0), DET, EMPTY, "gmr(1)", ISProposal.uniform([EMPTY]), 100, 50)
        assert (e.estimate, e.se) == (0.0, 0.0)

    def test_proposal_validation(self):
        with pytest.raises(ValidationError):
            ISProposal.uniform([])
        with pytest.raises(ValidationError):
            ISProposal((EMPTY, EMPTY), (1, 1))
        with pytest.raises(ValidationError):
            ISProposal((EMPTY, S([0])), (1, 0))


class TestReproducibility:
    def test_worker_invariance(self):
        p = Problem.homogeneous_gaussian(3, 1.0)
        reps = 3 * BLOCK_SIZE + 17
        a = simulate_paths(SumIntersection(3.0), p, S([1]), reps, 500, 11, workers=1)
        b = simulate_paths(SumIntersection(3.0), p, S([1]), reps, 500, 11, workers=3)
        assert np.array_equal(a.T, b.T) and np.array_equal(a.D, b.D)

    def test_seed_matters(self):
        p = Problem.homogeneous_gaussian(3, 1.0)
        a = simulate_paths(SumIntersection(3.0), p, EMPTY, 100, 500, 1)
        b = simulate_paths(SumIntersection(3.0), p, EMPTY, 100, 500, 2)
        assert not np.array_equal(a.T, b.T)

    @settings(max_examples=10)
    @given(st.integers(1, 3 * BLOCK_SIZE))
    def test_prefix_stability(self, reps):
        # a run of n reps is a prefix of any longer run with the same seed
        p = Problem.homogeneous_gaussian(2, 1.0)
        a = simulate_paths(SumIntersection(1.5), p, EMPTY, reps, 200, 4)
        b = simulate_paths(SumIntersection(1.5), p, EMPTY, 3 * BLOCK_SIZE, 200, 4)
        full = reps - reps % BLOCK_SIZE
        assert np.array_equal(a.T[:full], b.T[:full])


class TestFamily:
    def test_symmetry_across_same_size_truths(self):
        p = Problem.homogeneous_gaussian(3, 1.0)
        res = max_error_over_family(SumIntersection(2.0), p, "gmr(1)", 20_000, seed=8)
        by_size = {}
        for A, est in res.table:
            by_size.setdefault(len(A), []).append(est)
        for group in by_size.values():
            for x in group:
                for y in group:
                    assert abs(x.estimate - y.estimate) <= 3 * math.hypot(x.se, y.se)

    def test_gmr_error_is_invariant_across_all_truths(self):
        # sign-flip symmetry of Gaussian streams: the GMR error of Sum-Intersection does not depend on the truth
        p = Problem.homogeneous_gaussian(3, 1.0)
        res = max_error_over_family(SumIntersection(2.0, 2), p, "gmr(2)", 20_000, seed=9)
        ests = [e for _, e in res.table]
        ref = ests[0]
        assert all(abs(e.estimate - ref.estimate) <= 3 * math.hypot(e.se, ref.se) for e in ests)

    def test_singleton_family(self):
        p = Problem.homogeneous_gaussian(3, 1.0, family=HypothesisFamily.explicit(3, [[1]]))
        res = max_error_over_family(SumIntersection(2.0), p, "gmr(1)", 500)
        assert len(res.table) == 1 and res.argmax == S([1])

    def test_deterministic_table(self):
        res = max_error_over_family(Intersection(2, 2), DET, "wrong_decision", 100, 50)
        assert all(e.estimate in (0.0, 1.0) and e.se == 0 for _, e in res.table)

    def test_large_family_guard(self):
        p = Problem.homogeneous_gaussian(13, 1.0)
        with pytest.raises(ResourceError):
            max_error_over_family(SumIntersection(2.0), p, "gmr(1)", 10)
