from __future__ import annotations

import math

import numpy as np
import pytest

from fbsde_smp.assumptions import (AssumptionInputs, NoSolution, check_assumptions, compute_t_star, g_function,
                                   lambda_beta, solve_s_l)
from fbsde_smp.core import InvalidArgument

# T - int_{L1}^inf dy / G(y) for (L1, L2, beta0, T) = (1, 1, 0.5, 1), from scipy.integrate.quad
T_STAR_ORACLE = 0.9246358550964382


def test_lambda_beta_examples():
    assert lambda_beta(1.0, 0.0, 1.0, 2) == 0.0
    assert lambda_beta(1.0, 0.1, 1.0, 2) == pytest.approx(0.16)
    assert lambda_beta(2.0, 0.5, 2.0, 2) == pytest.approx(20.0)
    with pytest.raises(InvalidArgument):
        lambda_beta(1.0, 0.1, 1.0, 1.0)


def test_g_function_examples():
    assert g_function(0.0, 0.7, 0.3, 0.5) == pytest.approx(0.7)
    y = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(g_function(y, 0.7, 0.0, 0.5), 0.7 * (1 + np.abs(y)))
    assert g_function(1.0, 1.0, 1.0, 0.5) == pytest.approx(12.0)
    with pytest.raises(InvalidArgument):
        g_function(1.0, 1.0, 1.0, 0.0)


def test_s_ode_closed_form_when_L2_vanishes():
    t, s, l = solve_s_l(AssumptionInputs(0.7, 0.0, 0.1))
    np.testing.assert_allclose(s, 1.7 * np.exp(0.7 * (1 - t)) - 1, atol=1e-6)
    np.testing.assert_allclose(l, -s, atol=1e-12)


def test_s_ode_zero_terminal():
    _, s, l = solve_s_l(AssumptionInputs(0.0, 0.3, 0.1))
    assert np.all(s == 0.0) and np.all(l == 0.0)


def test_s_ode_blows_up():
    with pytest.raises(NoSolution):
        solve_s_l(AssumptionInputs(1.0, 1.0, 0.1, beta0=0.5))


def test_t_star_sentinel_and_oracle():
    assert compute_t_star(AssumptionInputs(0.5, 0.0, 0.1))[2] == -math.inf
    t1, t2, ts = compute_t_star(AssumptionInputs(1.0, 1.0, 0.1, beta0=0.5))
    assert ts == pytest.approx(T_STAR_ORACLE, abs=1e-10)
    assert t1 == pytest.approx(t2, abs=1e-12)


def test_check_assumptions_examples():
    assert check_assumptions(AssumptionInputs(0.0, 0.0, 0.0)).passed
    assert not check_assumptions(AssumptionInputs(0.5, 0.0, 100.0)).sigma_z_ok
    seq = [check_assumptions(AssumptionInputs(0.5, v, v)).passed for v in (1.0, 0.3, 0.1, 0.03, 0.01)]
    assert not seq[0] and seq[-1]
    rep = check_assumptions(AssumptionInputs(0.5, 0.1, 0.05)).to_dict()
    assert rep["q_bounded"] == "not checked"


def test_inputs_validated():
    with pytest.raises(InvalidArgument):
        AssumptionInputs(-1.0, 0.0, 0.0)
    with pytest.raises(InvalidArgument):
        AssumptionInputs(1.0, 0.0, 0.0, beta0=1.0)
