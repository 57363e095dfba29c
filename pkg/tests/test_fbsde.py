from __future__ import annotations

import math

import numpy as np
import pytest

from fbsde_smp.adjoint import solve_first_order_adjoint
from fbsde_smp.core import Control
from fbsde_smp.fbsde import (ContractionFailure, LinearFbsdeSpec, inner_size, path_signs, simulate_paths,
                             solve_coupled, solve_coupled_picard, solve_linear_lattice, solve_linear_lattice_picard,
                             solve_linear_oracle)
from fbsde_smp.problem import load_problem, preset
from fbsde_smp.variation import solve_delta, solve_first_variation


def inline(b, sigma, g, phi, N=32, x0=0.0, lip=None):
    lip = lip or {"L1": 1.0, "L2": 0.0, "L3": 0.0}
    return load_problem({"coefficients": {"b": b, "sigma": sigma, "g": g, "phi": phi, "lipschitz": lip},
                         "N": N, "x0": x0})


def test_constant_terminal():
    pr = inline("0", "0", "0", "2.5", x0=0.3)
    sol = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    np.testing.assert_allclose(sol.Y.flat, 2.5)
    np.testing.assert_allclose(sol.Z.flat, 0.0)
    np.testing.assert_allclose(sol.xp, sol.xm)


def test_brownian_martingale():
    pr = inline("0", "1", "0", "x", x0=0.2)
    sol = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    np.testing.assert_allclose(sol.Y.flat, sol.X.flat, atol=1e-12)
    np.testing.assert_allclose(sol.Z.flat, 1.0, atol=1e-12)


def test_linear_driver_exponential():
    a, x0 = 0.7, 1.0
    errs = []
    for N in (32, 64, 128):
        pr = inline("0", "1", f"{a}*y", "x", N=N, x0=x0, lip={"L1": 1.0})
        errs.append(abs(solve_coupled(pr.coeffs, pr.candidate(), pr.tree).Y0 - math.exp(a) * x0))
    assert errs[0] < 2.0 / 32
    assert 0.4 < errs[2] / errs[1] < 0.6


def test_picard_decoupled_two_sweeps():
    pr = preset("decoupled", N=32)
    sol = solve_coupled_picard(pr.coeffs, pr.candidate(), pr.tree)
    assert sol.picard_iterations == 2
    assert sol.residual_history[-1] == 0.0


def test_picard_matches_local_solver():
    pr = preset("nonlinear", N=64)
    a = solve_coupled_picard(pr.coeffs, pr.candidate(), pr.tree, tol=1e-13)
    b = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    np.testing.assert_allclose(a.Y.flat, b.Y.flat, atol=1e-11)
    np.testing.assert_allclose(a.Z.flat, b.Z.flat, atol=1e-11)


def test_picard_failure_carries_history():
    pr = preset("nonlinear", N=16)
    with pytest.raises(ContractionFailure) as info:
        solve_coupled_picard(pr.coeffs, pr.candidate(), pr.tree, tol=1e-30, max_iter=3)
    assert len(info.value.history) == 3


@pytest.mark.parametrize("name", ["linear-const", "linear-timevar", "linear-zcoupled"])
def test_linear_oracle_agrees_with_lattice(name):
    pr = preset(name, N=128)
    sol = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    ref = solve_linear_oracle(pr.linear, pr.tree)
    S = inner_size(pr.tree)
    # nodes near the root: first-order lattice error only
    assert abs(sol.Y0 - ref.Y0) < 0.03
    assert np.max(np.abs(sol.Z.flat[:S][:10] - ref.Z.flat[:10])) < 0.05


def test_linear_oracle_trivial_coefficients():
    zero = {k: "0" for k in ("alpha1", "beta1", "gamma1", "alpha2", "beta2", "gamma2", "alpha3", "beta3",
                             "gamma3", "L1", "L2", "L3")}
    spec = LinearFbsdeSpec.from_strings(zero, kappa=0.8, x0=0.5)
    from fbsde_smp.core import build_tree
    ref = solve_linear_oracle(spec, build_tree(1.0, 8, 0.5))
    assert ref.Y0 == pytest.approx(0.4)
    np.testing.assert_allclose(ref.Z.flat, 0.0)


def test_linear_oracle_volatility_only():
    c = {k: "0" for k in ("alpha1", "beta1", "gamma1", "alpha2", "beta2", "gamma2", "alpha3", "beta3",
                          "gamma3", "L1", "L2", "L3")}
    c["L2"] = "0.7"
    spec = LinearFbsdeSpec.from_strings(c, kappa=1.3, x0=0.0)
    from fbsde_smp.core import build_tree
    ref = solve_linear_oracle(spec, build_tree(1.0, 8))
    np.testing.assert_allclose(ref.Z.flat, 1.3 * 0.7)


def test_kernel_and_picard_routes_agree():
    pr = preset("nonlinear", N=64)
    opt = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    first = solve_first_order_adjoint(pr.coeffs, opt, pr.beta0)
    S = inner_size(pr.tree)
    delta = solve_delta(pr.coeffs, opt, first.p_bar, pr.spike.u, None, pr.beta0, pr.coeffs.lipschitz.L3)
    fv = solve_first_variation(pr.coeffs, opt, first, delta, pr.spike, check_route=None)
    a = solve_linear_lattice(fv.system)
    b = solve_linear_lattice_picard(fv.system)
    np.testing.assert_allclose(a.eta, b.eta, atol=1e-11)
    np.testing.assert_allclose(a.zeta, b.zeta, atol=1e-11)
    assert b.iterations > 1 and S > 0


def test_path_signs_exact_enumeration():
    omega, w = path_signs(4, 10_000)
    assert omega.shape == (16, 4)
    assert len({tuple(r) for r in omega}) == 16
    np.testing.assert_allclose(w.sum(), 1.0)


def test_simulated_paths_follow_children():
    pr = preset("nonlinear", N=16)
    sol = solve_coupled(pr.coeffs, pr.candidate(), pr.tree)
    omega, _ = path_signs(16, 64, seed=1)
    X, Y, Z = simulate_paths(pr.coeffs, sol, omega)
    assert X.shape[1] == 17 and Y.shape == X.shape
    assert np.all(X[:, 0] == pr.x0)
    # Y(0) is deterministic and equals the lattice value
    np.testing.assert_allclose(Y[:, 0], sol.Y0)


def test_feedback_control_matches_step_control():
    pr = preset("nonlinear", N=32)
    a = solve_coupled(pr.coeffs, Control.constant(1.0, 32), pr.tree)
    b = solve_coupled(pr.coeffs, Control(feedback=lambda t, x: np.ones_like(x), N=32), pr.tree)
    np.testing.assert_allclose(a.Y.flat, b.Y.flat)
