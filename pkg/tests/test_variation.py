from __future__ import annotations

import warnings

import numpy as np
import pytest

from fbsde_smp.adjoint import solve_first_order_adjoint, solve_second_order_adjoint
from fbsde_smp.assumptions import NoSolution
from fbsde_smp.core import Control, CoefficientModel, InvalidArgument, Lipschitz, SpikeSpec, TimeGrid
from fbsde_smp.fbsde import inner_size, solve_coupled
from fbsde_smp.problem import preset
from fbsde_smp.variation import (delta_fixed_point, delta_linear_z, estimate_spike_orders, loglog_slope,
                                 make_spike_control, solve_delta, solve_first_variation, solve_second_variation,
                                 spike_indicator, variation_bundle)


def model(sigma, L3=0.5):
    return CoefficientModel.from_strings({"b": "0", "sigma": sigma, "g": "0", "phi": "x"},
                                         Lipschitz(L1=1.0, L2=0.0, L3=L3))


def test_delta_zero_when_control_unchanged():
    d, res, _, _ = delta_fixed_point(model("0.3*sin(z) + u"), 0.1, 0.2, 0.3, 0.4, 1.0, 1.0, 0.9, L3=0.3)
    assert d == 0.0 and res == 0.0


def test_delta_without_z_dependence():
    d, res, it, method = delta_fixed_point(model("0.5 + 2*u", L3=0.0), 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.7, L3=0.0)
    assert d == pytest.approx(0.7 * 2.0) and it <= 2 and method == "fixed-point"


def test_delta_linear_z_example():
    m = model("0.5*z + u", L3=0.5)
    d, res, _, _ = delta_fixed_point(m, 0.0, 0.0, 0.0, 0.3, 1.0, 0.0, 0.5, L3=0.5)
    assert float(d) == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert float(delta_linear_z(0.5, 0.5, 1.0)) == pytest.approx(2.0 / 3.0, abs=1e-15)


def test_delta_bisection_fallback():
    m = model("3*z + u", L3=3.0)
    with pytest.warns(UserWarning):
        d, res, it, method = delta_fixed_point(m, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.2, L3=3.0)
    # Delta = 0.2 (3 Delta + 1) -> Delta = 0.5
    assert method == "bisection" and float(d) == pytest.approx(0.5, abs=1e-12)


def test_delta_no_solution():
    m = model("z + u", L3=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(NoSolution):
            # Delta = 1 * (Delta + 1) has no root
            delta_fixed_point(m, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, L3=1.0)


def test_make_spike_control():
    grid = TimeGrid(1.0, 8)
    u = make_spike_control(Control.constant(0.0, 8), SpikeSpec(0.25, 0.25, 1.0), grid)
    assert np.flatnonzero(u.values()).tolist() == [2, 3]
    same = make_spike_control(Control.constant(0.0, 8), SpikeSpec(0.25, 0.25, 0.0), grid)
    assert np.all(same.values() == 0.0)
    fb = make_spike_control(Control(feedback=lambda t, x: 0.5 * x, N=8), SpikeSpec(0.25, 0.25, 1.0), grid)
    x = np.array([1.0, 2.0])
    assert fb.at(2, 0.25, x).tolist() == [1.0, 1.0] and fb.at(5, 0.625, x).tolist() == [0.5, 1.0]
    with pytest.raises(InvalidArgument):
        make_spike_control(Control.constant(0.0, 4), SpikeSpec(0.25, 0.25, 1.0), grid)


def _setup(name, N=64):
    pr = preset(name, N=N)
    opt = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    first = solve_first_order_adjoint(pr.coeffs, opt, pr.beta0)
    second = solve_second_order_adjoint(pr.coeffs, opt, first)
    return pr, opt, first, second


def test_first_variation_fields():
    pr, opt, first, _ = _setup("nonlinear")
    S = inner_size(pr.tree)
    ind = spike_indicator(opt, pr.spike)
    delta = solve_delta(pr.coeffs, opt, first.p_bar, pr.spike.u, ind, pr.beta0, pr.coeffs.lipschitz.L3)
    fv = solve_first_variation(pr.coeffs, opt, first, delta, pr.spike)
    np.testing.assert_allclose(fv.solution.eta[0], first.p.flat, atol=1e-12)
    np.testing.assert_allclose(fv.solution.zeta[0], first.K1.flat, atol=1e-12)
    np.testing.assert_allclose(fv.solution.zeta[1], delta.flat, atol=1e-12)
    assert np.max(np.abs(fv.solution.eta[1])) < 1e-12
    np.testing.assert_allclose(fv.check.eta, fv.solution.eta, atol=1e-11)
    assert ind.sum() == sum(k + 1 for k in pr.spike.steps(pr.grid)) and S > 0


def test_no_spike_effect_gives_zero_variations():
    pr, opt, first, second = _setup("nonlinear", N=32)
    spike = SpikeSpec(0.25, 0.125, 0.0)
    delta = solve_delta(pr.coeffs, opt, first.p_bar, 0.0, spike_indicator(opt, spike), pr.beta0)
    fv = solve_first_variation(pr.coeffs, opt, first, delta, spike)
    assert np.all(fv.solution.eta[1:] == 0.0) and np.all(fv.solution.zeta[1:] == 0.0)
    sv = solve_second_variation(pr.coeffs, opt, first, second, fv, spike)
    assert sv.Y2_0 == 0.0 and sv.Yhat0 == 0.0


def test_linear_problem_second_variation_is_yhat():
    pr, opt, first, second = _setup("linear-const", N=64)
    delta = solve_delta(pr.coeffs, opt, first.p_bar, pr.spike.u, spike_indicator(opt, pr.spike), pr.beta0)
    fv = solve_first_variation(pr.coeffs, opt, first, delta, pr.spike)
    sv = solve_second_variation(pr.coeffs, opt, first, second, fv, pr.spike)
    np.testing.assert_allclose(sv.solution.eta[3], 0.0, atol=1e-14)
    assert sv.Y2_0 == pytest.approx(sv.Yhat0, abs=1e-13)


def test_variation_bundle_relations_small():
    vb = variation_bundle(preset("nonlinear", N=64), paths=256)
    assert vb.r_Y1 < 1e-6 and vb.r_Z1 < 1e-5
    d = vb.to_dict()
    assert {"r_Y1", "r_Z1", "r_Y2"} <= set(d)


def test_loglog_slope_exact_power():
    eps = np.array([0.5, 0.25, 0.125])
    s, r2 = loglog_slope(eps, 3.0 * eps ** 1.5)
    assert s == pytest.approx(1.5) and r2 == pytest.approx(1.0)


def test_spike_orders_argument_checks():
    pr = preset("nonlinear", N=64)
    with pytest.raises(InvalidArgument):
        estimate_spike_orders(pr, eps_list=[0.25, 0.125], paths=10)
    with pytest.raises(InvalidArgument):
        estimate_spike_orders(pr, eps_list=[0.25, 0.125, 0.001], paths=10)


def test_spike_orders_small_run():
    rep = estimate_spike_orders(preset("nonlinear", N=256), paths=2000, betas=(2,))
    assert len(rep.rows()) >= 4 * 3
    assert 0.8 <= rep.fit("X", 2).slope <= 1.2
    assert rep.fit("X-X1", 2).slope > 1.6
