from __future__ import annotations

import numpy as np
import pytest

from fbsde_smp.core import InvalidArgument
from fbsde_smp.fbsde import solve_coupled
from fbsde_smp.lq import (LQCoefficients, example_closed_form_gap, example_problem, lq_brute_force_cost, lq_check_mp,
                          lq_solve_hmn, lq_solve_P, lq_solve_p, piecewise_control)
from fbsde_smp.problem import load_problem


def test_p_trivial_and_linear():
    t, p = lq_solve_p(LQCoefficients({}, F=0.7), 1.0, 16)
    np.testing.assert_allclose(p, 0.7)
    t, p = lq_solve_p(LQCoefficients({"A3": 0.4}, F=0.7), 1.0, 16)
    np.testing.assert_allclose(p, 0.7 + 0.4 * (1 - t), atol=1e-13)


def test_P_closed_forms():
    t, P = lq_solve_P(LQCoefficients({}, F=0.7), 1.0, 16)
    np.testing.assert_allclose(P, 0.0)
    lq = LQCoefficients({"A4": 0.5, "B4": 0.2, "C2": 0.1, "D2": 1.0}, F=0.7, G=0.3)
    t, P = lq_solve_P(lq, 1.0, 16)
    # K1 = 0 and R1 = 0, so P = G + (A4 + B4 F^2)(T - t)
    np.testing.assert_allclose(P, 0.3 + (0.5 + 0.2 * 0.49) * (1 - t), atol=1e-12)


def test_time_dependent_coefficients_accepted():
    lq = LQCoefficients({"A3": "0.4*t"}, F=0.0)
    t, p = lq_solve_p(lq, 1.0, 32)
    np.testing.assert_allclose(p, 0.2 * (1 - t * t), atol=1e-12)
    with pytest.raises(InvalidArgument):
        LQCoefficients({"A3": "x"})
    with pytest.raises(InvalidArgument):
        LQCoefficients({"Z9": 1.0})


def test_example_adjoints():
    pr = example_problem(N=32)
    t, p = lq_solve_p(pr.lq, 1.0, 32)
    _, P = lq_solve_P(pr.lq, 1.0, 32)
    np.testing.assert_allclose(p, 1.0)
    np.testing.assert_allclose(P, 0.0)


def test_example_hmn():
    d = 0.8
    pr = example_problem(0.5, 1.0, 0.25, d, N=32)
    opt = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    hmn = lq_solve_hmn(pr.lq, pr, opt, paths=32, seed=0)
    y0 = opt.Y0
    np.testing.assert_allclose(hmn.h, 2 * y0, atol=1e-12)
    np.testing.assert_allclose(hmn.m, 2 * d * y0, atol=1e-12)
    np.testing.assert_allclose(hmn.n, 0.0, atol=1e-12)


def test_example_gaps():
    pr = example_problem(0.5, 1.0, 0.25, 1.0, N=32)
    opt = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    rep = lq_check_mp(pr.lq, pr, opt)
    assert rep.passed and rep.gap_by_u() == pytest.approx({-1.0: 0.5, 0.0: 0.0, 1.0: 1.5}, abs=1e-12)
    assert not rep.local_passed and rep.worst_local["u"] == -1.0


def test_trivial_inequality():
    pr = load_problem({"coefficients": "example", "N": 16, "params": {"b": 0.0, "c": 0.0}})
    lq = LQCoefficients({"C2": 0.5}, F=1.0)
    opt = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    rep = lq_check_mp(lq, pr, opt)
    assert np.all(rep.gaps == 0.0) and rep.passed


def test_brute_force_example_argmin_and_closed_form():
    pr = example_problem(0.5, 1.0, 0.25, 1.0, N=32)
    bf = lq_brute_force_cost(pr.lq, pr, pieces=3)
    assert bf.argmin == (0.0, 0.0, 0.0)
    base = bf.costs[bf.controls.index((0.0, 0.0, 0.0))]
    dt = pr.grid.dt
    for c, j in bf.table():
        closed = example_closed_form_gap(piecewise_control(c, 32).values(), 0.25, 1.0, dt)
        assert j - base == pytest.approx(closed, abs=10 * dt)


def test_brute_force_pure_penalty():
    pr = example_problem(0.5, 1.0, 0.0, 1.0, N=24)
    bf = lq_brute_force_cost(pr.lq, pr, pieces=2)
    base = bf.costs[bf.controls.index((0.0, 0.0))]
    for c, j in bf.table():
        assert j - base == pytest.approx(0.5 * sum(v * v for v in c), abs=1e-12)
    assert bf.argmin == (0.0, 0.0)


def test_brute_force_beats_zero_when_2cd_exceeds_one():
    pr = example_problem(0.5, 1.0, 0.6, 1.0, N=24)
    bf = lq_brute_force_cost(pr.lq, pr, pieces=3)
    assert bf.argmin != (0.0, 0.0, 0.0)
    assert min(bf.argmin) == -1.0


def test_brute_force_limit():
    pr = example_problem(N=8)
    with pytest.raises(InvalidArgument):
        lq_brute_force_cost(pr.lq, pr, pieces=3, max_candidates=10)
