from __future__ import annotations

import math

import numpy as np
import pytest

from fbsde_smp.adjoint import (gamma_representation, solve_auxiliary_yhat, solve_first_order_adjoint,
                               solve_second_order_adjoint)
from fbsde_smp.core import SingularityError, SpikeSpec
from fbsde_smp.fbsde import inner_size, solve_coupled
from fbsde_smp.lq import lq_solve_p
from fbsde_smp.problem import load_problem, preset
from fbsde_smp.variation import solve_delta


def solved(pr):
    opt = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    first = solve_first_order_adjoint(pr.coeffs, opt, pr.beta0)
    return opt, first, solve_second_order_adjoint(pr.coeffs, opt, first)


def inline(b, sigma, g, phi, N=64, lip=None, **kw):
    doc = {"coefficients": {"b": b, "sigma": sigma, "g": g, "phi": phi,
                            "lipschitz": lip or {"L1": 1.0, "L2": 0.1, "L3": 0.1}}, "N": N}
    doc.update(kw)
    return load_problem(doc)


def test_vanishing_derivatives():
    pr = inline("0.3*u", "0.5 + 0.2*u", "0.1*u**2", "0.8*x")
    _, first, second = solved(pr)
    np.testing.assert_allclose(first.p.flat, 0.8, atol=1e-14)
    np.testing.assert_allclose(first.q.flat, 0.0, atol=1e-14)
    np.testing.assert_allclose(first.K1.flat, 0.0, atol=1e-14)
    np.testing.assert_allclose(second.P.flat, 0.0, atol=1e-14)


def test_k1_formula_with_constant_derivatives():
    pr = inline("0", "0.2*x + 0.1*y + 0.1*z + 0.5", "0", "0.8*x", lip={"L1": 1.0, "L2": 0.1, "L3": 0.1})
    _, first, _ = solved(pr)
    S = inner_size(pr.tree)
    p, q = first.p.flat[:S], first.q.flat
    np.testing.assert_allclose(first.K1_formula, (0.2 * p + 0.1 * p * p + q) / (1 - 0.1 * p), atol=1e-14)
    np.testing.assert_allclose(first.K1.flat, first.K1_formula, atol=5e-3)


def test_linear_bsde_closed_form():
    # b, sigma free of (y, z): -dp = (g_x + (g_y + b_x) p) dt, p(T) = 1
    errs = []
    for N in (64, 128):
        pr = inline("0.3*x", "0.5", "0.2*x + 0.4*y", "x", N=N, lip={"L1": 1.0, "L2": 0.0, "L3": 0.0})
        _, first, _ = solved(pr)
        t = np.linspace(0, 1, N + 1)
        exact = (1 + 0.2 / 0.7) * np.exp(0.7 * (1 - t)) - 0.2 / 0.7
        errs.append(max(float(np.max(np.abs(first.p.step(k) - exact[k]))) for k in range(N + 1)))
    assert errs[0] < 0.05 and 0.4 < errs[1] / errs[0] < 0.6


def test_lq_p_matches_riccati_to_first_order():
    errs = []
    for N in (64, 128, 256):
        pr = preset("lq-generic", N=N)
        _, first, _ = solved(pr)
        _, p = lq_solve_p(pr.lq, 1.0, N)
        errs.append(max(float(np.max(np.abs(first.p.step(k) - p[k]))) for k in range(N + 1)))
        assert float(np.max(np.abs(first.q.flat))) < 1e-12
    assert errs[-1] < 2e-5
    assert all(0.45 < b / a < 0.55 for a, b in zip(errs, errs[1:]))


def test_example_adjoints_exact():
    pr = preset("example", N=64)
    _, first, second = solved(pr)
    np.testing.assert_allclose(first.p.flat, 1.0, atol=1e-14)
    np.testing.assert_allclose(second.P.flat, 0.0, atol=1e-14)
    np.testing.assert_allclose(second.Q.flat, 0.0, atol=1e-14)


def test_second_order_vanishes_without_curvature():
    pr = preset("linear-const", N=64)
    _, _, second = solved(pr)
    np.testing.assert_allclose(second.P.flat, 0.0, atol=1e-14)
    np.testing.assert_allclose(second.K2.flat, 0.0, atol=1e-14)


def test_singularity_detected():
    pr = inline("0", "2*z + 0.5", "0", "0.55*x", lip={"L1": 1.0, "L2": 0.0, "L3": 2.0})
    opt = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    with pytest.raises(SingularityError):
        solve_first_order_adjoint(pr.coeffs, opt, 0.5)


def test_yhat_vanishes_without_spike_effect():
    pr = preset("nonlinear", N=32)
    opt, first, second = solved(pr)
    spike = SpikeSpec(0.25, 0.125, 0.0)  # replacement equals the candidate
    S = inner_size(pr.tree)
    delta = solve_delta(pr.coeffs, opt, first.p_bar, 0.0, None, pr.beta0, pr.coeffs.lipschitz.L3)
    np.testing.assert_allclose(delta.flat, 0.0)
    Yh, Zh, Yh0 = solve_auxiliary_yhat(pr.coeffs, opt, first, second, spike, delta.flat)
    assert Yh0 == 0.0 and np.all(Yh.flat == 0.0)
    assert gamma_representation(pr.coeffs, opt, first, second, spike, np.zeros(S)) == 0.0


def test_gamma_is_plain_expectation_for_zero_drivers():
    pr = inline("0.3*u", "0.5 + 0.2*u", "0.1*u**2", "0.8*x", N=32,
                spike={"t0": 0.25, "eps": 0.25, "u": 1.0})
    opt, first, second = solved(pr)
    S = inner_size(pr.tree)
    delta = solve_delta(pr.coeffs, opt, first.p.flat[:S], 1.0, None, pr.beta0, pr.coeffs.lipschitz.L3)
    g = gamma_representation(pr.coeffs, opt, first, second, pr.spike, delta.flat)
    # bracket = p db + q ds + dg + P ds^2 / 2 = 0.8 * 0.3 + 0.1 on the spike steps
    assert g == pytest.approx(0.25 * (0.8 * 0.3 + 0.1), abs=1e-12)
    _, _, yh0 = solve_auxiliary_yhat(pr.coeffs, opt, first, second, pr.spike, delta.flat)
    assert yh0 == pytest.approx(g, abs=1e-12)


def test_yhat_over_eps_approaches_gamma_density():
    pr = preset("nonlinear", N=256)
    opt, first, second = solved(pr)
    S = inner_size(pr.tree)
    vals = []
    for eps in (0.125, 0.0625, 0.03125):
        spike = SpikeSpec(0.25, eps, 1.0)
        d = solve_delta(pr.coeffs, opt, first.p_bar, 1.0, None, pr.beta0, pr.coeffs.lipschitz.L3)
        yh0 = solve_auxiliary_yhat(pr.coeffs, opt, first, second, spike, d.flat)[2]
        g = gamma_representation(pr.coeffs, opt, first, second, spike, d.flat)
        assert abs(yh0 - g) < 5 * pr.grid.dt * eps
        vals.append(yh0 / eps)
    assert abs(vals[2] - vals[1]) < abs(vals[1] - vals[0])
    assert math.isfinite(vals[-1]) and S > 0
