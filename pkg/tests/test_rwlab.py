import math

import numpy as np
import pytest

from seqmt.divergence import most_favorable
from seqmt.errors import ValidationError
from seqmt.metrics import GMRLoss
from seqmt.model import EMPTY, Problem, SignalConfig
from seqmt.rules import TildeMsprt
from seqmt.simulate import estimate_ess
from seqmt.rwlab import (Deterministic, FromProblem, GaussianVector, WalkSpec, expansion_prediction, h_rstar,
                         residual_report, simulate_T_b)

SQPI = 1 / math.sqrt(math.pi)


def test_deterministic_examples():
    assert simulate_T_b(WalkSpec(Deterministic((0.5,))), 2.0, 10).ess_mean == 4
    r = simulate_T_b(WalkSpec(Deterministic((0.5, 1.0))), 2.0, 10)
    assert r.ess_mean == 4 and r.ess_se == 0


def test_deterministic_residuals_are_ceiling_gaps():
    # dyadic means and thresholds keep the cumulative sums exact in floating point
    walk = WalkSpec(Deterministic((0.625, 0.875)))
    rows = residual_report(walk, [1.0, 2.25, 5.0, 7.5, 12.125], reps=5)
    for row in rows:
        assert 0 <= row["diff_fo"] < 1
        assert row["ess"] == math.ceil(row["b"] / 0.625)


def test_wald_lower_bound():
    walk = WalkSpec(GaussianVector.iid((1.0, 1.0)))
    r = simulate_T_b(walk, 25.0, 10_000, seed=1)
    assert walk.mu1 * r.ess_mean >= 25 - 4 * r.ess_se


def test_expansion_prediction():
    walk = WalkSpec(GaussianVector.iid((1.0, 1.0)))
    assert walk.r_star == 2
    fo, so = expansion_prediction(walk, 16.0, SQPI)
    assert fo == 16 and so == pytest.approx(16 + 4 * SQPI) == pytest.approx(18.257, abs=1e-3)
    fo4, so4 = expansion_prediction(walk, 64.0, SQPI)
    assert (so4 - fo4) == pytest.approx(2 * (so - fo))
    asym = WalkSpec(GaussianVector.iid((1.0, 2.0)))
    assert asym.r_star == 1 and expansion_prediction(asym, 9.0, 0.7) == (9.0, 9.0)


def test_h_rstar_is_h_estimate():
    assert h_rstar([[2.0]]) == (0.0, 0.0)
    h, se = h_rstar(np.eye(2), 400_000, 0)
    assert abs(h - SQPI) <= 3 * se
    h, se = h_rstar(np.ones((2, 2)), 100_000, 0)
    assert abs(h) <= 3 * se


def test_monotone_in_b():
    walk = WalkSpec(GaussianVector((1.0, 1.2), ((1.0, 0.3), (0.3, 1.0))))
    rows = residual_report(walk, [2.0, 4.0, 6.0, 8.0], reps=4000, seed=2, h=0.0)
    for a, b in zip(rows, rows[1:]):
        assert b["ess"] >= a["ess"] - 3 * math.hypot(a["ess_se"], b["ess_se"])


def test_minimal_block_cov():
    walk = WalkSpec(GaussianVector((1.0, 2.0, 1.0), ((1, 0.1, 0.2), (0.1, 1, 0), (0.2, 0, 3))))
    assert walk.r_star == 2
    assert np.allclose(walk.minimal_block_cov(), [[1, 0.2], [0.2, 3]])


def test_from_problem_agrees_with_restricted_tilde_rule():
    p = Problem.homogeneous_gaussian(3, 1.0)
    W = GMRLoss(1)
    walk = WalkSpec(FromProblem(p, EMPTY, W))
    assert walk.d == 7 and walk.mu1 == pytest.approx(0.5) and walk.r_star == 3
    assert np.allclose(walk.minimal_block_cov(), np.eye(3))
    c = 1e-3
    d_star = most_favorable(p, W, EMPTY).maximizers[0]
    tilde = TildeMsprt(c, W, p.family, restrict_to=(EMPTY, d_star))
    a = simulate_T_b(walk, math.log(1 / c), 10_000, seed=3)
    b = estimate_ess(tilde, p, EMPTY, 10_000, seed=4)
    assert abs(a.ess_mean - b.ess_mean) <= 3 * math.hypot(a.ess_se, b.ess_se)


def test_validation():
    with pytest.raises(ValidationError):
        WalkSpec(GaussianVector.iid((1.0, -0.5)))
    with pytest.raises(ValidationError):
        GaussianVector((1.0, 1.0), ((1.0, 2.0), (2.0, 1.0)))
    with pytest.raises(ValidationError):
        residual_report(WalkSpec(Deterministic((1.0,))), [2.0, 1.0], reps=5)
    with pytest.raises(ValidationError):
        simulate_T_b(WalkSpec(Deterministic((1.0,))), 0.0, 5)


def test_worker_invariance():
    walk = WalkSpec(GaussianVector.iid((1.0, 1.0)))
    a = residual_report(walk, [4.0, 9.0], reps=5000, seed=5, h=SQPI, workers=1)
    b = residual_report(walk, [4.0, 9.0], reps=5000, seed=5, h=SQPI, workers=2)
    assert a == b
