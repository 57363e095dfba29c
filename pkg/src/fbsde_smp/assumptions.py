"""Numerical checks of the smallness hypotheses.

Everything here is a pure function of a handful of constants: the Lipschitz
bounds L1 (x-derivatives and the generator), L2 (y/z-dependence of b and the
y-dependence of sigma), L3 (z-dependence of sigma), the margin beta0 and the
per-exponent constants C_beta of the moment estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import InvalidArgument, NumericDivergence

BETAS = (2, 4, 6, 8)


class NoSolution(NumericDivergence):
    """The comparison ODE blows up before reaching t = 0."""


@dataclass(frozen=True)
class AssumptionInputs:
    L1: float
    L2: float
    L3: float
    beta0: float = 0.5
    T: float = 1.0
    C_beta: Mapping[int, float] = field(default_factory=lambda: {b: 1.0 for b in BETAS})

    def __post_init__(self) -> None:
        if min(self.L1, self.L2, self.L3) < 0:
            raise InvalidArgument("Lipschitz constants must be nonnegative")
        if not 0 < self.beta0 < 1:
            raise InvalidArgument("beta0 must lie strictly inside (0, 1)")
        if not self.T > 0:
            raise InvalidArgument("horizon must be positive")
        if any(v < 0 for v in self.C_beta.values()):
            raise InvalidArgument("C_beta must be nonnegative")

    @property
    def c1(self) -> float:
        return max(self.L2, self.L3)

    @classmethod
    def from_problem(cls, problem) -> "AssumptionInputs":
        lip = problem.coeffs.lipschitz
        return cls(lip.L1, lip.L2, lip.L3, problem.beta0, problem.grid.T, dict(problem.C_beta))


@dataclass(frozen=True)
class AssumptionReport:
    inputs: AssumptionInputs
    Lambda: dict[int, float]
    s0: float
    l0: float
    t1: float
    t2: float
    t_star: float

    @property
    def smallness_ok(self) -> bool:
        return all(v < 1.0 for v in self.Lambda.values())

    @property
    def p_bound_ok(self) -> bool:
        return self.t_star < 0 and math.isfinite(self.s0)

    @property
    def bound_used(self) -> float:
        return max(self.s0, -self.l0)

    @property
    def sigma_z_ok(self) -> bool:
        return self.p_bound_ok and self.bound_used * self.inputs.L3 <= 1.0 - self.inputs.beta0

    @property
    def passed(self) -> bool:
        return self.smallness_ok and self.p_bound_ok and self.sigma_z_ok

    def to_dict(self) -> dict:
        i = self.inputs
        return {
            "inputs": {"L1": i.L1, "L2": i.L2, "L3": i.L3, "beta0": i.beta0, "T": i.T,
                       "C_beta": {str(k): v for k, v in sorted(i.C_beta.items())}},
            "Lambda": {str(k): v for k, v in sorted(self.Lambda.items())},
            "s0": _finite(self.s0), "l0": _finite(self.l0),
            "t1": _finite(self.t1), "t2": _finite(self.t2), "t_star": _finite(self.t_star),
            "smallness_ok": self.smallness_ok, "p_bound_ok": self.p_bound_ok,
            "sigma_z_ok": self.sigma_z_ok, "q_bounded": "not checked", "passed": self.passed,
        }


def _finite(v: float):
    return v if math.isfinite(v) else ("-inf" if v < 0 else "inf")


def lambda_beta(C_beta: float, c1: float, T: float, beta: float) -> float:
    """Contraction constant C_beta 2^(beta+1) (1 + T^beta) c1^beta."""
    if beta <= 1:
        raise InvalidArgument("beta must exceed 1")
    if C_beta < 0 or c1 < 0 or not T > 0:
        raise InvalidArgument("need C_beta >= 0, c1 >= 0 and T > 0")
    return C_beta * 2.0 ** (beta + 1) * (1.0 + T ** beta) * c1 ** beta


def g_function(y, L1: float, L2: float, beta0: float):
    """Growth function of the comparison ODEs (cubic in |y|)."""
    if not beta0 > 0:
        raise InvalidArgument("beta0 must be positive")
    a = np.abs(y)
    ib = 1.0 / beta0
    return (L1 + (L2 + L1 + ib * L1 * L2) * a + (L2 + ib * (L1 * L2 + L2 * L2)) * a * a
            + ib * L2 * L2 * a ** 3)


def compute_t_star(inputs: AssumptionInputs, steps: int = 10_000) -> tuple[float, float, float]:
    """Breakdown times t1, t2 and t* = max(t1, t2).

    The improper integrals of 1/G over [L1, inf) and (-inf, -L1] are mapped to
    [0, pi/2) by y = +/-(L1 + tan(theta)) and evaluated with composite Simpson.
    A divergent integral (L2 = 0, or L1 = 0 where G vanishes at the origin)
    gives the sentinel -inf.
    """
    L1, L2, b0, T = inputs.L1, inputs.L2, inputs.beta0, inputs.T
    if L2 == 0.0 or L1 == 0.0:
        return -math.inf, -math.inf, -math.inf
    n = steps + (steps % 2)
    theta = np.linspace(0.0, 0.5 * math.pi, n + 1)

    def integral(sign: float) -> float:
        th = theta[:-1]
        tan = np.tan(th)
        f = np.empty(n + 1)
        f[:-1] = (1.0 + tan * tan) / g_function(sign * (L1 + tan), L1, L2, b0)
        f[-1] = 0.0  # cubic growth: sec^2 / tan^3 -> 0
        w = np.ones(n + 1)
        w[1:-1:2], w[2:-1:2] = 4.0, 2.0
        return float((theta[1] - theta[0]) / 3.0 * np.dot(w, f))

    t2 = T - integral(1.0)
    t1 = T - integral(-1.0)
    return t1, t2, max(t1, t2)


def solve_s_l(inputs: AssumptionInputs, steps: int = 2000, cap: float = 1e12,
              check_t_star: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward RK4 for s' = -G(s), s(T) = L1 and l' = G(l), l(T) = -L1.

    Returns (t, s, l) sampled on ``steps + 1`` uniform points of [0, T].
    """
    if check_t_star and compute_t_star(inputs)[2] >= 0:
        raise NoSolution("t* >= 0: the comparison ODE blows up inside [0, T]")
    L1, L2, b0, T = inputs.L1, inputs.L2, inputs.beta0, inputs.T
    h = T / steps
    t = np.linspace(0.0, T, steps + 1)
    out = np.empty((2, steps + 1))
    sign = np.array([1.0, -1.0])
    v = sign * L1
    out[:, -1] = v

    def rhs(w):
        return sign * g_function(w, L1, L2, b0)  # d/d(T - t)

    for i in range(steps, 0, -1):
        k1 = rhs(v)
        k2 = rhs(v + 0.5 * h * k1)
        k3 = rhs(v + 0.5 * h * k2)
        k4 = rhs(v + h * k3)
        v = v + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > cap:
            raise NoSolution(f"comparison ODE exceeded {cap:g} at t = {t[i - 1]:.6g}")
        out[:, i - 1] = v
    return t, out[0], out[1]


def check_assumptions(inputs: AssumptionInputs) -> AssumptionReport:
    Lam = {b: lambda_beta(inputs.C_beta.get(b, 1.0), inputs.c1, inputs.T, b) for b in BETAS}
    t1, t2, ts = compute_t_star(inputs)
    s0, l0 = math.inf, -math.inf
    if ts < 0:
        try:
            _, s, l = solve_s_l(inputs, check_t_star=False)
            s0, l0 = float(s[0]), float(l[0])
        except NoSolution:
            pass
    return AssumptionReport(inputs, Lam, s0, l0, t1, t2, ts)
