"""Linear-quadratic specialization.

State: dX = (A1 X + B1 Y + C1 Z + D1 u) dt + (A2 X + B2 Y + C2 Z + D2 u) dB,
-dY = (A3 X + B3 Y + C3 Z + D3 u) dt - Z dB, Y(T) = F X(T) + J, with cost
E[int (A4 X^2 + B4 Y^2 + C4 Z^2 + D4 u^2) dt + G X(T)^2] + Y(0)^2.
With deterministic coefficients the adjoints p, P solve ODEs and the maximum
principle becomes an explicit quadratic inequality in u - u_bar.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import sympy as sp

from .core import SYMBOLS, Control, InvalidArgument, SingularityError, NumericDivergence
from .fbsde import (FbsdeSolution, LinearLatticeSystem, inner_size, node_coordinates, node_times, path_signs,
                    simulate_paths, solve_coupled, solve_linear_lattice, solve_linear_lattice_picard, step_slice)

LQ_NAMES = tuple(f"{a}{i}" for i in (1, 2, 3, 4) for a in "ABCD")
BLOWUP_CAP = 1e12
MAX_CANDIDATES = 10 ** 6


@dataclass(frozen=True)
class LQCoefficients:
    """Deterministic coefficients (numbers or expressions in t) and the constants F, G, J."""

    coeffs: Mapping[str, float | str]
    F: float = 0.0
    G: float = 0.0
    J: float = 0.0

    def __post_init__(self) -> None:
        unknown = set(self.coeffs) - set(LQ_NAMES)
        if unknown:
            raise InvalidArgument(f"unknown LQ coefficients {sorted(unknown)}")
        t = SYMBOLS[0]
        for k, v in self.coeffs.items():
            if sp.sympify(v, locals={"t": t}).free_symbols - {t}:
                raise InvalidArgument(f"LQ coefficient {k} may depend on t only")

    @classmethod
    def from_mapping(cls, d: Mapping[str, float | str]) -> "LQCoefficients":
        return cls({k: v for k, v in d.items() if k in LQ_NAMES}, float(d.get("F", 0.0)),
                   float(d.get("G", 0.0)), float(d.get("J", 0.0)))

    def fn(self, name: str):
        t = SYMBOLS[0]
        f = sp.lambdify(t, sp.sympify(self.coeffs.get(name, 0.0), locals={"t": t}), modules="numpy")
        return lambda s: np.broadcast_to(np.asarray(f(s), dtype=float), np.shape(s)) * 1.0

    def at(self, t) -> dict[str, np.ndarray]:
        return {n: self.fn(n)(t) for n in LQ_NAMES}

    def strings(self) -> dict[str, str]:
        c = {n: str(self.coeffs.get(n, 0.0)) for n in LQ_NAMES}
        return {
            "b": f"({c['A1']})*x + ({c['B1']})*y + ({c['C1']})*z + ({c['D1']})*u",
            "sigma": f"({c['A2']})*x + ({c['B2']})*y + ({c['C2']})*z + ({c['D2']})*u",
            "g": f"({c['A3']})*x + ({c['B3']})*y + ({c['C3']})*z + ({c['D3']})*u",
            "phi": f"({self.F})*x + ({self.J})",
        }


def _k1(c: Mapping[str, float], p: float) -> float:
    den = 1.0 - p * c["C2"]
    if abs(den) < 1e-8:
        raise SingularityError(f"1 - p C2 = {den:.3g}")
    return (c["A2"] * p + c["B2"] * p * p) / den


def _rhs(c: Mapping[str, float], v: np.ndarray) -> np.ndarray:
    p, P = v
    K = _k1(c, p)
    A = c["A3"] + c["B3"] * p + c["C3"] * K + c["A1"] * p + c["B1"] * p * p + c["C1"] * K * p
    R1 = 2 * (c["A1"] + c["B1"] * p + c["C1"] * K) + (c["A2"] + c["B2"] * p + c["C2"] * K) ** 2
    return np.array([A, R1 * P + c["A4"] + c["B4"] * p * p + c["C4"] * K * K])  # = -d/dt


def _integrate(lq: LQCoefficients, T: float, N: int, min_fine: int = 4000) -> tuple[np.ndarray, np.ndarray]:
    sub = max(1, math.ceil(min_fine / N))
    n = sub * N
    h = T / n
    half = lq.at(np.linspace(0.0, T, 2 * n + 1))  # coefficients at every RK stage time
    v = np.array([lq.F, lq.G])
    out = np.empty((2, N + 1))
    out[:, N] = v

    def c_at(i2: int) -> dict[str, float]:
        return {k: float(a[i2]) for k, a in half.items()}

    for i in range(n, 0, -1):
        c0, c1, c2 = c_at(2 * i), c_at(2 * i - 1), c_at(2 * i - 2)
        k1 = _rhs(c0, v)
        k2 = _rhs(c1, v + 0.5 * h * k1)
        k3 = _rhs(c1, v + 0.5 * h * k2)
        k4 = _rhs(c2, v + h * k3)
        v = v + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > BLOWUP_CAP:
            raise NumericDivergence(f"LQ Riccati ODE blew up near t = {i * h:.6g}")
        if (i - 1) % sub == 0:
            out[:, (i - 1) // sub] = v
    _rhs(c_at(0), v)
    return np.linspace(0.0, T, N + 1), out


def lq_solve_p(lq: LQCoefficients, T: float, N: int) -> tuple[np.ndarray, np.ndarray]:
    """RK4 (backward, refined steps) for p with p(T) = F; returns (t, p) on the grid."""
    t, out = _integrate(lq, T, N)
    return t, out[0]


def lq_solve_P(lq: LQCoefficients, T: float, N: int) -> tuple[np.ndarray, np.ndarray]:
    """P with P(T) = G, driven by R1 P + A4 + B4 p^2 + C4 K1^2 (integrated jointly with p)."""
    t, out = _integrate(lq, T, N)
    return t, out[1]


def lq_k1(lq: LQCoefficients, t: np.ndarray, p: np.ndarray) -> np.ndarray:
    fns = {n: lq.fn(n) for n in ("A2", "B2", "C2")}
    return np.array([_k1({n: float(f(s)) for n, f in fns.items()}, pp) for s, pp in zip(t, p)])


def hmn_system(lq: LQCoefficients, optimal: FbsdeSolution) -> LinearLatticeSystem:
    """Forward h, backward (m, n) on the optimal lattice, as a generic linear system."""
    tree = optimal.tree
    S = inner_size(tree)
    t = node_times(tree, tree.N - 1)
    c = lq.at(t)
    coef = np.vstack([c["B3"], c["B1"], c["B2"], c["C3"], c["C1"], c["C2"], c["A3"], c["A1"], c["A2"]])
    forcing = np.zeros((9, S))
    forcing[0] = 2 * c["B4"] * optimal.Y.flat[:S]
    forcing[3] = 2 * c["C4"] * optimal.Z.flat
    forcing[6] = 2 * c["A4"] * node_coordinates(tree, tree.N - 1)
    terminal = np.zeros((4, tree.N + 1))
    terminal[0] = lq.F
    terminal[1] = 2 * lq.G * tree.nodes(tree.N)
    return LinearLatticeSystem(tree, optimal.xp, optimal.xm, np.ascontiguousarray(coef), forcing, terminal)


@dataclass
class HmnPaths:
    t: np.ndarray
    X: np.ndarray
    h: np.ndarray
    m: np.ndarray
    n: np.ndarray
    picard_iterations: int
    direct_gap: float


def lq_solve_hmn(lq: LQCoefficients, problem, optimal: FbsdeSolution, paths: int = 64, seed: int = 0) -> HmnPaths:
    """(h, m, n) along sign paths; m = a h + c0 and n = K h + d0 from the Picard lattice solve.

    ``direct_gap`` is the largest difference between the Picard and the direct
    kernel fields (a cross-check of the two solvers).
    """
    tree = optimal.tree
    N, dt, r = tree.N, tree.grid.dt, tree.grid.sqrt_dt
    system = hmn_system(lq, optimal)
    pic = solve_linear_lattice_picard(system)
    direct = solve_linear_lattice(system)
    gap = float(max(np.max(np.abs(pic.eta - direct.eta)), np.max(np.abs(pic.zeta - direct.zeta))))
    omega, _ = path_signs(N, paths, seed)
    X, Y, Z = simulate_paths(problem.coeffs, optimal, omega)
    M = omega.shape[0]
    h = np.empty((M, N + 1))
    m = np.empty((M, N + 1))
    n = np.empty((M, N))
    h[:, 0] = 2.0 * optimal.Y0
    a1, b1, g1, a2, b2, g2 = system.coef[:6]
    for k in range(N):
        sl = step_slice(k)
        xk = X[:, k]
        a, c0 = tree.interpolate(np.ascontiguousarray(pic.eta[:2, sl]), k, xk)
        K, d0 = tree.interpolate(np.ascontiguousarray(pic.zeta[:2, sl]), k, xk)
        f1, f2 = tree.interpolate(np.ascontiguousarray(system.forcing[[0, 3]][:, sl]), k, xk)
        m[:, k] = a * h[:, k] + c0
        n[:, k] = K * h[:, k] + d0
        cf = [float(v[sl][0]) for v in (a1, b1, g1, a2, b2, g2)]  # deterministic coefficients
        drift = cf[0] * h[:, k] + cf[1] * m[:, k] + cf[2] * n[:, k] + f1
        diff = cf[3] * h[:, k] + cf[4] * m[:, k] + cf[5] * n[:, k] + f2
        h[:, k + 1] = h[:, k] + drift * dt + diff * r * omega[:, k]
    m[:, N] = lq.F * h[:, N] + 2.0 * lq.G * X[:, N]
    return HmnPaths(tree.grid.times, X, h, m, n, pic.iterations, gap)


@dataclass
class LQReport:
    t: np.ndarray
    p: np.ndarray
    P: np.ndarray
    K1: np.ndarray
    u_grid: np.ndarray
    u_bar: np.ndarray
    gaps: np.ndarray          # (N, paths, len(u_grid))
    local: np.ndarray         # first-order term only, same shape
    hmn: HmnPaths
    tolerance: float
    worst: dict = field(default_factory=dict)
    worst_local: dict = field(default_factory=dict)
    local_grid: np.ndarray | None = None

    @property
    def passed(self) -> bool:
        return self.worst["gap"] >= -self.tolerance

    @property
    def local_passed(self) -> bool:
        return self.worst_local["gap"] >= -self.tolerance

    def gap_by_u(self) -> dict[float, float]:
        """Smallest gap over all steps and paths for each competitor u."""
        return {float(u): float(np.min(self.gaps[:, :, i])) for i, u in enumerate(self.u_grid)}


def _worst(values: np.ndarray, t: np.ndarray, u_grid: np.ndarray) -> dict:
    """Most negative entry; ties broken by smallest t, then smallest u."""
    per = values.min(axis=1)  # (N, U)
    v = per.min()
    ks, us = np.nonzero(per <= v + 0.0)
    order = np.lexsort((u_grid[us], t[ks]))
    k, i = int(ks[order[0]]), int(us[order[0]])
    return {"gap": float(v), "t": float(t[k]), "step": k, "u": float(u_grid[i])}


def lq_check_mp(lq: LQCoefficients, problem, optimal: FbsdeSolution, u_grid: Sequence[float] | None = None,
                tolerance: float = 1e-8, paths: int = 64, seed: int = 0,
                local_grid: Sequence[float] | None = None) -> LQReport:
    """Evaluate the explicit LQ inequality at every step, path and grid value of u.

    ``local`` holds the first-order (convex-perturbation) term only, evaluated
    on ``local_grid`` (default: the interval hull of ``u_grid`` with 101 points).
    """
    tree = optimal.tree
    N = tree.N
    T = tree.grid.T
    t, out = _integrate(lq, T, N)
    p, P = out
    K1 = lq_k1(lq, t, p)
    hmn = lq_solve_hmn(lq, problem, optimal, paths, seed)
    ug = np.asarray(problem.control.grid() if u_grid is None else u_grid, dtype=float)
    lg = np.linspace(ug.min(), ug.max(), 101) if local_grid is None else np.asarray(local_grid, float)
    ub = np.array([optimal.u[step_slice(k)][0] for k in range(N)])
    c = lq.at(t[:N])
    first = (c["D1"][:, None] * hmn.m[:, :N].T + c["D2"][:, None] * hmn.n.T + c["D3"][:, None] * hmn.h[:, :N].T
             + 2 * c["D4"][:, None] * ub[:, None])  # (N, paths)
    quad = (c["C4"] * p[:N] ** 2 * c["D2"] ** 2 / (1 - p[:N] * c["C2"]) ** 2 + c["D4"] + P[:N] * c["D2"] ** 2)
    du = ug[None, :] - ub[:, None]  # (N, U)
    gaps = first[:, :, None] * du[:, None, :] + quad[:, None, None] * du[:, None, :] ** 2
    dl = lg[None, :] - ub[:, None]
    local = first[:, :, None] * dl[:, None, :]
    return LQReport(t, p, P, K1, ug, ub, gaps, local, hmn, tolerance, _worst(gaps, t[:N], ug),
                    _worst(local, t[:N], lg), lg)


# ---------------------------------------------------------------------------
# Brute force
# ---------------------------------------------------------------------------


def lq_cost(lq: LQCoefficients, sol: FbsdeSolution) -> float:
    """J(u) by backward induction of the running cost on the lattice, plus Y(0)^2."""
    tree = sol.tree
    N, dt = tree.N, tree.grid.dt
    t = node_times(tree, N - 1)
    x = node_coordinates(tree, N - 1)
    c = lq.at(t)
    S = inner_size(tree)
    run = (c["A4"] * x ** 2 + c["B4"] * sol.Y.flat[:S] ** 2 + c["C4"] * sol.Z.flat ** 2
           + c["D4"] * sol.u ** 2) * dt
    V = lq.G * tree.nodes(N) ** 2
    for k in range(N - 1, -1, -1):
        sl = step_slice(k)
        vp = tree.interpolate(V, k + 1, sol.xp[sl])
        vm = tree.interpolate(V, k + 1, sol.xm[sl])
        V = 0.5 * (vp + vm) + run[sl]
    return float(V[0] + sol.Y0 ** 2)


def piecewise_control(values: Sequence[float], N: int) -> Control:
    k = len(values)
    idx = np.minimum((np.arange(N) * k) // N, k - 1)
    return Control(np.asarray(values, dtype=float)[idx])


@dataclass
class BruteForceResult:
    controls: list[tuple[float, ...]]
    costs: np.ndarray
    argmin: tuple[float, ...]
    min_cost: float

    def table(self) -> list[tuple[tuple[float, ...], float]]:
        return list(zip(self.controls, map(float, self.costs)))


def lq_brute_force_cost(lq: LQCoefficients, problem, values: Sequence[float] | None = None, pieces: int = 3,
                        max_candidates: int = MAX_CANDIDATES) -> BruteForceResult:
    """Enumerate piecewise-constant deterministic controls and solve each one on the lattice."""
    vals = sorted(set(float(v) for v in (problem.control.grid() if values is None else values)))
    if pieces < 1:
        raise InvalidArgument("need at least one piece")
    if len(vals) ** pieces > max_candidates:
        raise InvalidArgument(f"search space {len(vals)}^{pieces} exceeds {max_candidates}")
    tree = problem.tree
    controls = list(itertools.product(vals, repeat=pieces))
    costs = np.array([lq_cost(lq, solve_coupled(problem.coeffs, piecewise_control(cu, tree.N), tree))
                      for cu in controls])
    best = min(range(len(controls)), key=lambda i: (costs[i], controls[i]))
    return BruteForceResult(controls, costs, controls[best], float(costs[best]))


# ---------------------------------------------------------------------------
# The worked example
# ---------------------------------------------------------------------------


def example_closed_form_gap(u_steps: np.ndarray, c: float, d: float, dt: float) -> float:
    """(E int c u dt)^2 + E int (u^2 + 2 c d u) dt for a deterministic step control."""
    u = np.asarray(u_steps, dtype=float)
    return float((c * u.sum() * dt) ** 2 + np.sum(u * u + 2 * c * d * u) * dt)


def example_problem(a: float = 0.5, b: float = 1.0, c: float = 0.25, d: float = 1.0, T: float = 1.0, N: int = 128,
                    domain: str = "finite"):
    from .problem import load_problem
    doc = {"coefficients": "example", "params": {"a": a, "b": b, "c": c, "d": d}, "T": T, "N": N}
    if domain == "interval":
        doc["control"] = {"domain": {"kind": "interval", "lo": -1.0, "hi": 1.0, "resolution": 101},
                          "candidate": 0.0}
    return load_problem(doc)


def random_example_parameters(rng: np.random.Generator, T: float = 1.0) -> dict[str, float]:
    """Random (a, b, c, d) of the worked example family inside the guaranteed regime.

    The z-coupling a = C2 is clamped so that Lambda_2 = 8 (1 + T^2) a^2 < 1, the
    terminal slope d = F so that |F C2| <= 0.5, and c so that 0 < |2 c d| <= 1,
    which keeps u = 0 optimal.
    """
    amax = 0.99 / math.sqrt(8.0 * (1.0 + T * T))
    a = float(rng.uniform(-amax, amax))
    d = float(rng.uniform(0.2, 1.5)) * float(rng.choice([-1.0, 1.0]))
    d = float(np.clip(d, -0.5 / max(abs(a), 1e-12), 0.5 / max(abs(a), 1e-12)))
    c = float(rng.uniform(0.05, 1.0)) / (2.0 * abs(d)) * float(rng.choice([-1.0, 1.0]))
    b = float(rng.uniform(-1.0, 1.0))
    return {"a": a, "b": b, "c": c, "d": d}
