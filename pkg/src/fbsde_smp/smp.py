"""Maximum-principle checks along a candidate trajectory.

Every inner lattice node (steps 0..N-1) is a point of the probability space,
so "a.e., a.s." becomes "at every node".  The gap at a node is
H(u) - H(u_bar); the global condition asks for every gap to be >= -tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adjoint import AdjointBundle, SecondOrderBundle, solve_first_order_adjoint, solve_second_order_adjoint
from .assumptions import NoSolution
from .core import CoefficientModel, InvalidArgument, NumericDivergence
from .fbsde import FbsdeSolution, inner_size, node_coordinates, node_times, solve_coupled
from .variation import delta_fixed_point

DEFAULT_TOLERANCE = 1e-8
MODES = ("global", "global-linear-z", "local", "lq")


def hamiltonian(coeffs: CoefficientModel, t, x, y, z, u, ubar, p, q, P, delta):
    """p b + q sigma + P (sigma - sigma_bar)^2 / 2 + g, all evaluated at (z + delta, u)."""
    zs = np.asarray(z) + np.asarray(delta)
    sb = coeffs.sigma(t, x, y, z, ubar)
    s = coeffs.sigma(t, x, y, zs, u)
    return p * coeffs.b(t, x, y, zs, u) + q * s + 0.5 * P * (s - sb) ** 2 + coeffs.g(t, x, y, zs, u)


def hamiltonian_linear_z(coeffs: CoefficientModel, t, x, y, z, u, ubar, p, q, P):
    """Linear-z form: b and sigma at (z, u); g at z + p (sigma(z, u) - sigma_bar)."""
    sb = coeffs.sigma(t, x, y, z, ubar)
    s = coeffs.sigma(t, x, y, z, u)
    return (p * coeffs.b(t, x, y, z, u) + q * s + 0.5 * P * (s - sb) ** 2
            + coeffs.g(t, x, y, np.asarray(z) + p * (s - sb), u))


def hamiltonian_u(coeffs: CoefficientModel, t, x, y, z, u, p, q):
    """Derivative in u at u_bar: p b_u + q s_u + g_u + (p b_z + q s_z + g_z) p s_u / (1 - p s_z)."""
    j = coeffs.jet(t, x, y, z, u, order=1)
    du = p * j.sigma_u / (1.0 - p * j.sigma_z)
    return p * j.b_u + q * j.sigma_u + j.g_u + (p * j.b_z + q * j.sigma_z + j.g_z) * du


@dataclass
class MpReport:
    """Gaps per (row, competitor u).  Rows are lattice nodes, or (step, path) pairs in LQ mode."""

    mode: str
    tolerance: float
    u_grid: np.ndarray
    step: np.ndarray
    index: np.ndarray
    t: np.ndarray
    x: np.ndarray
    u_bar: np.ndarray
    gaps: np.ndarray
    unchecked: np.ndarray
    max_abs_q: float = float("nan")
    extra: dict = field(default_factory=dict)
    worst: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.worst = worst_violation(self.gaps, self.step, self.index, self.t, self.x, self.u_grid)

    @property
    def passed(self) -> bool:
        return self.worst["gap"] >= -self.tolerance

    @property
    def n_unchecked(self) -> int:
        return int(np.count_nonzero(self.unchecked))

    def gap_by_u(self) -> dict[float, float]:
        out = {}
        for i, u in enumerate(self.u_grid):
            col = self.gaps[:, i]
            col = col[np.isfinite(col)]
            out[float(u)] = float(col.min()) if col.size else float("nan")
        return out

    def rows(self):
        """(step, index, t, x, u, gap) for every checked entry."""
        for r in range(self.gaps.shape[0]):
            if self.unchecked[r]:
                continue
            for i, u in enumerate(self.u_grid):
                yield (int(self.step[r]), int(self.index[r]), float(self.t[r]), float(self.x[r]), float(u),
                       float(self.gaps[r, i]))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "tolerance": self.tolerance, "passed": self.passed,
            "worst": self.worst, "u_grid": [float(u) for u in self.u_grid],
            "gap_by_u": {repr(k): v for k, v in self.gap_by_u().items()},
            "rows": int(self.gaps.shape[0]), "unchecked": self.n_unchecked,
            "max_abs_q": self.max_abs_q, **self.extra,
        }


def worst_violation(gaps: np.ndarray, step, index, t, x, u_grid) -> dict:
    """Most negative gap; ties broken by smallest t, then smallest u, then smallest row index."""
    g = np.where(np.isfinite(gaps), gaps, np.inf)
    if g.size == 0 or not np.any(np.isfinite(g)):
        return {"gap": math.inf, "t": None, "step": None, "index": None, "x": None, "u": None}
    v = g.min()
    rs, us = np.nonzero(g == v)
    order = np.lexsort((index[rs], u_grid[us], t[rs]))
    r, i = int(rs[order[0]]), int(us[order[0]])
    return {"gap": float(v), "t": float(t[r]), "step": int(step[r]), "index": int(index[r]),
            "x": float(x[r]), "u": float(u_grid[i])}


@dataclass
class _Trajectory:
    optimal: FbsdeSolution
    first: AdjointBundle
    second: SecondOrderBundle
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    ub: np.ndarray
    step: np.ndarray
    index: np.ndarray


def _trajectory(problem, optimal: FbsdeSolution | None) -> _Trajectory:
    coeffs, tree = problem.coeffs, problem.tree
    if optimal is None:
        optimal = solve_coupled(coeffs, problem.candidate(), tree)
    first = solve_first_order_adjoint(coeffs, optimal, problem.beta0)
    second = solve_second_order_adjoint(coeffs, optimal, first)
    S = inner_size(tree)
    step = np.concatenate([np.full(k + 1, k) for k in range(tree.N)])
    index = np.concatenate([np.arange(k + 1) for k in range(tree.N)])
    return _Trajectory(optimal, first, second, node_times(tree, tree.N - 1), node_coordinates(tree, tree.N - 1),
                       optimal.Y.flat[:S], optimal.Z.flat, optimal.u, step, index)


def _delta_nodes(coeffs, tr: _Trajectory, u: float, p, beta0: float, L3: float) -> tuple[np.ndarray, np.ndarray]:
    """Delta(u) at every node; nodes where the solve fails get NaN and are flagged."""
    try:
        d, _, _, _ = delta_fixed_point(coeffs, tr.t, tr.x, tr.y, tr.z, u, tr.ub, p, beta0, L3)
        return d, np.zeros(d.shape, dtype=bool)
    except NumericDivergence:
        pass
    d = np.full(tr.t.shape, np.nan)
    for i in range(d.size):
        try:
            d[i] = delta_fixed_point(coeffs, tr.t[i], tr.x[i], tr.y[i], tr.z[i], u, tr.ub[i], p[i], beta0, L3)[0]
        except NoSolution:
            pass
    return d, ~np.isfinite(d)


def check_global_mp(problem, optimal: FbsdeSolution | None = None, mode: str | None = None,
                    tolerance: float = DEFAULT_TOLERANCE, u_grid=None, paths: int = 64, seed: int = 0) -> MpReport:
    """Gap H(u) - H(u_bar) at every node and every u of the control grid.

    ``mode`` defaults to "lq" for problems with an LQ block, "global-linear-z"
    for coefficients tagged sigma-linear-z and "global" otherwise.
    """
    if mode is None:
        mode = "lq" if problem.lq is not None else ("global-linear-z" if problem.coeffs.linear_in_z else "global")
    if mode not in ("global", "global-linear-z", "lq"):
        raise InvalidArgument(f"unknown global mode '{mode}'")
    ug = np.asarray(problem.control.grid() if u_grid is None else u_grid, dtype=float)
    if mode == "lq":
        return _lq_report(problem, optimal, tolerance, ug, paths, seed, local=False)
    coeffs = problem.coeffs
    if mode == "global-linear-z" and not coeffs.linear_in_z:
        raise InvalidArgument("global-linear-z mode needs coefficients tagged sigma-linear-z")
    tr = _trajectory(problem, optimal)
    p, q, P = tr.first.p.flat[:tr.t.size], tr.first.q.flat, tr.second.P.flat[:tr.t.size]
    args = (tr.t, tr.x, tr.y, tr.z)
    if mode == "global":
        Hbar = hamiltonian(coeffs, *args, tr.ub, tr.ub, p, q, P, 0.0)
    else:
        Hbar = hamiltonian_linear_z(coeffs, *args, tr.ub, tr.ub, p, q, P)
    gaps = np.empty((tr.t.size, ug.size))
    bad = np.zeros(tr.t.size, dtype=bool)
    for i, u in enumerate(ug):
        if mode == "global":
            d, fail = _delta_nodes(coeffs, tr, float(u), p, problem.beta0, coeffs.lipschitz.L3)
            bad |= fail
            H = hamiltonian(coeffs, *args, u, tr.ub, p, q, P, np.nan_to_num(d))
        else:
            H = hamiltonian_linear_z(coeffs, *args, u, tr.ub, p, q, P)
        gaps[:, i] = H - Hbar
        gaps[np.asarray(tr.ub) == u, i] = 0.0
    gaps[bad] = np.nan
    return MpReport(mode, tolerance, ug, tr.step, tr.index, tr.t, tr.x, tr.ub, gaps, bad, tr.first.max_abs_q)


def check_local_mp(problem, optimal: FbsdeSolution | None = None, tolerance: float = DEFAULT_TOLERANCE,
                   u_grid=None, paths: int = 64, seed: int = 0) -> MpReport:
    """Sign condition H_u (u - u_bar) >= 0 on an interval control domain."""
    if problem.control.kind != "interval" or not problem.control.convex:
        raise InvalidArgument("the local maximum principle needs an interval (convex) control domain")
    ug = np.asarray(problem.control.grid() if u_grid is None else u_grid, dtype=float)
    if problem.lq is not None:
        return _lq_report(problem, optimal, tolerance, ug, paths, seed, local=True)
    tr = _trajectory(problem, optimal)
    S = tr.t.size
    Hu = hamiltonian_u(problem.coeffs, tr.t, tr.x, tr.y, tr.z, tr.ub, tr.first.p.flat[:S], tr.first.q.flat)
    gaps = Hu[:, None] * (ug[None, :] - tr.ub[:, None])
    return MpReport("local", tolerance, ug, tr.step, tr.index, tr.t, tr.x, tr.ub, gaps,
                    np.zeros(S, dtype=bool), tr.first.max_abs_q, {"max_abs_H_u": float(np.max(np.abs(Hu)))})


def _lq_report(problem, optimal, tolerance, ug, paths, seed, local: bool) -> MpReport:
    from .lq import LQCoefficients, lq_check_mp

    lq = problem.lq if isinstance(problem.lq, LQCoefficients) else LQCoefficients.from_mapping(problem.lq)
    if optimal is None:
        optimal = solve_coupled(problem.coeffs, problem.candidate(), problem.tree)
    rep = lq_check_mp(lq, problem, optimal, ug, tolerance, paths, seed, local_grid=ug)
    g = rep.local if local else rep.gaps  # (N, M, U)
    N, M, U = g.shape
    step = np.repeat(np.arange(N), M)
    index = np.tile(np.arange(M), N)
    t = rep.t[:N][step]
    x = rep.hmn.X[:, :N].T.reshape(-1)
    ub = np.repeat(rep.u_bar, M)
    extra = {"p0": float(rep.p[0]), "P0": float(rep.P[0]), "h0": float(rep.hmn.h[0, 0]),
             "m0": float(rep.hmn.m[0, 0]), "n0": float(rep.hmn.n[0, 0]), "paths": M}
    return MpReport("local-lq" if local else "lq", tolerance, ug, step, index, t, x, ub, g.reshape(N * M, U),
                    np.zeros(N * M, dtype=bool), float("nan"), extra)
