"""Spike variations: the Delta correction, first and second variational systems, ε-orders.

The variational FBSDEs are linear with coefficients read from the optimal
lattice, so they are solved as :class:`LinearLatticeSystem` instances whose
decoupling fields are polynomials in the variational state.  Path functionals
(relation residuals, sup-norm statistics) are evaluated along sign paths that
follow the optimal forward dynamics.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .adjoint import (AdjointBundle, SecondOrderBundle, SpikeIncrements, solve_auxiliary_yhat,
                      solve_first_order_adjoint, solve_second_order_adjoint, spike_increments)
from .assumptions import NoSolution
from .core import CoefficientModel, Control, InvalidArgument, SpikeSpec, TimeGrid, TreeProcess
from .fbsde import (FbsdeSolution, LinearLatticeSolution, LinearLatticeSystem, inner_size, node_coordinates,
                    node_times, path_signs, simulate_paths, solve_coupled, solve_linear_lattice,
                    solve_linear_lattice_picard, step_slice)

DELTA_TOL = 1e-13
DELTA_MAX_ITER = 200
DEFAULT_EPS_FRACTIONS = (8, 16, 32, 64)


# ---------------------------------------------------------------------------
# Delta
# ---------------------------------------------------------------------------


@dataclass
class DeltaProcess:
    """Delta on the nodes of steps 0..N-1, zero off the spike set."""

    delta: TreeProcess
    residual: float
    iterations: int
    method: str = "fixed-point"

    @property
    def flat(self) -> np.ndarray:
        return self.delta.flat


def delta_residual(coeffs: CoefficientModel, t, x, y, z, u, ubar, p, delta) -> np.ndarray:
    s0 = coeffs.sigma(t, x, y, z, ubar)
    return np.abs(delta - p * (coeffs.sigma(t, x, y, z + delta, u) - s0))


def _bisect(F, lo, hi, tol: float, max_iter: int = 400) -> np.ndarray:
    flo = F(lo)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = F(mid)
        left = np.sign(fm) == np.sign(flo)
        lo = np.where(left, mid, lo)
        flo = np.where(left, fm, flo)
        hi = np.where(left, hi, mid)
        if np.max(hi - lo) <= tol:
            break
    return 0.5 * (lo + hi)


def delta_fixed_point(coeffs: CoefficientModel, t, x, y, z, u, ubar, p, beta0: float = 0.5,
                      L3: float | None = None, init=None, tol: float = DELTA_TOL,
                      max_iter: int = DELTA_MAX_ITER) -> tuple[np.ndarray, float, int, str]:
    """Solve Delta = p (sigma(z + Delta, u) - sigma(z, ubar)) node by node.

    Returns (Delta, max residual, iterations, method).  The plain iteration
    from ``init`` (default 0) is used when |p| L3 <= 1 - beta0; otherwise, or
    when it stalls, a bracketed bisection takes over with a warning.
    """
    t, x, y, z, u, ubar, p = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, x, y, z, u, ubar, p)))
    if t.size == 0:
        return np.zeros(0), 0.0, 0, "fixed-point"
    s0 = coeffs.sigma(t, x, y, z, ubar)

    def step(d):
        return p * (coeffs.sigma(t, x, y, z + d, u) - s0)

    contracting = L3 is None or float(np.max(np.abs(p))) * L3 <= 1.0 - beta0
    d = np.zeros(t.shape) if init is None else np.broadcast_to(np.asarray(init, dtype=float), t.shape).copy()
    if contracting:
        for it in range(1, max_iter + 1):
            nd = step(d)
            change = float(np.max(np.abs(nd - d)))
            d = nd
            if not math.isfinite(change):
                break
            if change <= tol:
                res = float(np.max(np.abs(d - step(d))))
                return d, res, it, "fixed-point"
        warnings.warn("Delta fixed point did not converge; switching to bisection")
    else:
        warnings.warn(f"|p| L3 = {np.max(np.abs(p)) * L3:.3g} exceeds 1 - beta0; using bisection for Delta")

    def F(v):
        return v - step(v)

    R = np.abs(step(np.zeros(t.shape))) / beta0 + 1.0
    # 40 doublings keep R far below 2^53, where F(R) = R - step(R) loses its sign to rounding
    for _ in range(40):
        ok = (F(-R) <= 0.0) & (F(R) >= 0.0)
        if np.all(ok):
            break
        R = np.where(ok, R, 2.0 * R)
    else:
        raise NoSolution("no sign change bracket for the Delta equation")
    d = _bisect(F, -R, R, tol)
    res = float(np.max(np.abs(F(d))))
    if not res <= 1e-10 * (1.0 + float(np.max(np.abs(d)))):
        raise NoSolution(f"Delta bisection left residual {res:.3g}")
    return d, res, 0, "bisection"


def delta_linear_z(p, sigma_z, dsigma1):
    """Closed form (1 - p A)^(-1) p delta sigma_1 when sigma = A z + sigma_1."""
    return np.asarray(p) * np.asarray(dsigma1) / (1.0 - np.asarray(p) * np.asarray(sigma_z))


def solve_delta(coeffs: CoefficientModel, optimal: FbsdeSolution, p: np.ndarray, u, indicator: np.ndarray | None = None,
                beta0: float = 0.5, L3: float | None = None, init=None, tol: float = DELTA_TOL) -> DeltaProcess:
    """Delta on the inner nodes where ``indicator`` is set (all nodes when None).

    ``p`` is a flat array over steps 0..N-1 and ``u`` the replacement control
    (scalar or flat array).
    """
    tree = optimal.tree
    S = inner_size(tree)
    p = np.asarray(p, dtype=float)
    if p.shape != (S,):
        raise InvalidArgument("p must be given on the nodes of steps 0..N-1")
    mask = np.ones(S, dtype=bool) if indicator is None else np.asarray(indicator) > 0
    u = np.broadcast_to(np.asarray(u, dtype=float), (S,))
    t = node_times(tree, tree.N - 1)
    x = node_coordinates(tree, tree.N - 1)
    y, z = optimal.Y.flat[:S], optimal.Z.flat
    init_m = None if init is None else np.broadcast_to(np.asarray(init, dtype=float), (S,))[mask]
    d, res, it, method = delta_fixed_point(coeffs, t[mask], x[mask], y[mask], z[mask], u[mask], optimal.u[mask],
                                           p[mask], beta0, L3, init_m, tol)
    out = np.zeros(S)
    out[mask] = d
    return DeltaProcess(TreeProcess(tree, out, tree.N - 1), res, it, method)


# ---------------------------------------------------------------------------
# Spike control
# ---------------------------------------------------------------------------


def make_spike_control(ubar: Control, spike: SpikeSpec, grid: TimeGrid) -> Control:
    """u^eps = replacement on the snapped spike steps, ubar elsewhere."""
    steps = list(spike.steps(grid))
    if not steps:
        raise InvalidArgument("the snapped spike set is empty")
    if ubar.N is not None and ubar.N != grid.N:
        raise InvalidArgument(f"control has {ubar.N} steps, grid has {grid.N}")
    if ubar.deterministic:
        v = ubar.values().copy()
        v[steps] = spike.u
        return Control(v)
    inside = set(steps)
    dt = grid.dt

    def fb(t, x):
        k = int(round(t / dt))
        return np.full(np.shape(x), spike.u) if k in inside else ubar.feedback(t, x)

    return Control(feedback=fb, N=grid.N)


def spike_indicator(optimal: FbsdeSolution, spike: SpikeSpec) -> np.ndarray:
    tree = optimal.tree
    ind = np.zeros(inner_size(tree))
    for k in spike.steps(tree.grid):
        ind[step_slice(k)] = 1.0
    return ind


# ---------------------------------------------------------------------------
# Variational systems
# ---------------------------------------------------------------------------


def _coef_rows(jet, S: int) -> np.ndarray:
    names = ("b_x", "b_y", "b_z", "sigma_x", "sigma_y", "sigma_z", "g_x", "g_y", "g_z")
    return np.vstack([np.broadcast_to(jet.get(n), (S,)) for n in names]).astype(float)


@dataclass
class FirstVariation:
    """Decoupling fields Y1 = a X1 + c0 and Z1 = K X1 + d0 of the first variational system."""

    system: LinearLatticeSystem
    solution: LinearLatticeSolution
    check: LinearLatticeSolution | None
    delta: DeltaProcess
    increments: SpikeIncrements
    route: str


@dataclass
class SecondVariation:
    """Decoupling fields of the second system, polynomial in (X2, X1)."""

    system: LinearLatticeSystem
    solution: LinearLatticeSolution
    Yhat: TreeProcess
    Yhat0: float

    @property
    def Y2_0(self) -> float:
        return self.solution.value0()


def _solve_system(system: LinearLatticeSystem, route: str) -> LinearLatticeSolution:
    if route == "kernel":
        return solve_linear_lattice(system)
    if route == "picard":
        return solve_linear_lattice_picard(system)
    raise InvalidArgument(f"unknown route '{route}'")


def solve_first_variation(coeffs: CoefficientModel, optimal: FbsdeSolution, first: AdjointBundle,
                          delta: DeltaProcess, spike: SpikeSpec, route: str = "kernel",
                          check_route: str | None = "picard") -> FirstVariation:
    """Linear lattice system of (X1, Y1, Z1) with the Delta-shifted spike forcing.

    ``route`` solves the system; ``check_route`` (if given) re-solves it by
    the other method for the closed-loop comparison.
    """
    tree = optimal.tree
    S = inner_size(tree)
    jet = first.jet
    inc = spike_increments(coeffs, optimal, spike, delta.flat)
    I, D = inc.indicator, inc.delta
    q = first.q.flat
    forcing = np.zeros((9, S))
    forcing[0] = -jet.b_z * D
    forcing[3] = -jet.sigma_z * D + inc.dsigma
    forcing[6] = -jet.g_z * D - q * inc.dsigma * I
    terminal = np.zeros((4, tree.N + 1))
    terminal[0] = coeffs.phi(tree.nodes(tree.N), 1)
    system = LinearLatticeSystem(tree, optimal.xp, optimal.xm, _coef_rows(jet, S), forcing, terminal,
                                 _stencils=first.stencils)
    sol = _solve_system(system, route)
    check = None if check_route is None else _solve_system(system, check_route)
    return FirstVariation(system, sol, check, delta, inc, route)


def _hessian(jet, name: str):
    g = lambda pq: np.asarray(jet.get(f"{name}_{pq}"), dtype=float)  # noqa: E731
    return {"xx": g("xx"), "yy": g("yy"), "zz": g("zz"), "xy": g("xy"), "xz": g("xz"), "yz": g("yz")}


def _bilinear(H, u, v):
    u0, u1, u2 = u
    v0, v1, v2 = v
    return (H["xx"] * u0 * v0 + H["yy"] * u1 * v1 + H["zz"] * u2 * v2
            + H["xy"] * (u0 * v1 + u1 * v0) + H["xz"] * (u0 * v2 + u2 * v0) + H["yz"] * (u1 * v2 + u2 * v1))


def solve_second_variation(coeffs: CoefficientModel, optimal: FbsdeSolution, first: AdjointBundle,
                           second: SecondOrderBundle, fv: FirstVariation, spike: SpikeSpec,
                           route: str = "kernel") -> SecondVariation:
    """Second variational system with chi = X1 as the auxiliary state.

    The quadratic forcing 1/2 v D^2 psi v^T uses v = [X1, Y1, Z1 - Delta I]
    = e X1 + o with e = [1, a, K] and o = [0, c0, d0 - Delta I] from the
    first-variation fields.
    """
    tree = optimal.tree
    S = inner_size(tree)
    dt, r = tree.grid.dt, tree.grid.sqrt_dt
    jet = first.jet
    inc = fv.increments
    I = inc.indicator
    a, c0 = fv.solution.eta[0, :S], fv.solution.eta[1, :S]
    K, d0 = fv.solution.zeta[0], fv.solution.zeta[1]
    e = (np.ones(S), a, K)
    o = (np.zeros(S), c0, d0 - inc.delta)
    coef = _coef_rows(jet, S)
    b1, g1, b2, g2 = coef[1], coef[2], coef[4], coef[5]
    a1c = coef[0] + b1 * a + g1 * K
    s1c = coef[3] + b2 * a + g2 * K
    drift0 = b1 * c0 + g1 * o[2]
    vol0 = b2 * c0 + g2 * o[2] + inc.dsigma
    forcing = np.zeros((9, S))
    q = first.q.flat
    dS = (inc.dsigma_x, inc.dsigma_y, inc.dsigma_z)
    for row, name in ((0, "b"), (3, "sigma"), (6, "g")):
        H = _hessian(jet, name)
        forcing[row] = 0.5 * _bilinear(H, o, o)
        forcing[row + 1] = _bilinear(H, e, o)
        forcing[row + 2] = 0.5 * _bilinear(H, e, e)
    forcing[0] += inc.db
    forcing[3] += sum(dS[i] * o[i] for i in range(3))
    forcing[4] += sum(dS[i] * e[i] for i in range(3)) * I
    forcing[6] += (q * inc.dsigma + inc.dg) * I
    terminal = np.zeros((4, tree.N + 1))
    xT = tree.nodes(tree.N)
    terminal[0] = coeffs.phi(xT, 1)
    terminal[3] = 0.5 * coeffs.phi(xT, 2)
    system = LinearLatticeSystem(tree, optimal.xp, optimal.xm, coef, forcing, terminal,
                                 lam_p=1.0 + a1c * dt + s1c * r, lam_m=1.0 + a1c * dt - s1c * r,
                                 mu_p=drift0 * dt + vol0 * r, mu_m=drift0 * dt - vol0 * r,
                                 _stencils=first.stencils)
    sol = _solve_system(system, route)
    Yh, _, Yh0 = solve_auxiliary_yhat(coeffs, optimal, first, second, spike, fv.delta.flat)
    return SecondVariation(system, sol, Yh, Yh0)


# ---------------------------------------------------------------------------
# Path evaluation
# ---------------------------------------------------------------------------


@dataclass
class VariationPaths:
    """Variational processes along sign paths of the optimal forward state."""

    Xbar: np.ndarray
    X1: np.ndarray       # closed loop: forced only through delta sigma on the spike
    Y1: np.ndarray       # p X1
    Z1: np.ndarray       # K1 X1 + Delta I
    X1d: np.ndarray      # direct route: forward dynamics with the solved (Y1, Z1) fields
    Y1d: np.ndarray
    Z1d: np.ndarray
    X2: np.ndarray | None
    Y2: np.ndarray | None
    Z2: np.ndarray | None
    relation2: np.ndarray | None   # p X2 + P X1^2 / 2 + Yhat
    spike_steps: np.ndarray
    weights: np.ndarray


def _stack(*rows) -> np.ndarray:
    return np.vstack([np.asarray(r, dtype=float) for r in rows])


def variation_paths(coeffs: CoefficientModel, optimal: FbsdeSolution, first: AdjointBundle, fv: FirstVariation,
                    sv: SecondVariation | None = None, second: SecondOrderBundle | None = None,
                    omega: np.ndarray | None = None, weights: np.ndarray | None = None,
                    paths: int = 1000, seed: int = 0, Xbar: np.ndarray | None = None,
                    direct: bool = True) -> VariationPaths:
    """Closed-loop and direct first variation (and the second one when ``sv`` is given) along paths.

    ``Xbar`` may pass precomputed optimal paths for ``omega``; ``direct=False``
    integrates the closed loop only.
    """
    tree = optimal.tree
    N, dt, r = tree.N, tree.grid.dt, tree.grid.sqrt_dt
    S = inner_size(tree)
    if omega is None:
        omega, weights = path_signs(N, paths, seed)
    M = omega.shape[0]
    if Xbar is None:
        Xbar, _, _ = simulate_paths(coeffs, optimal, omega)
    coef = fv.system.coef
    f = fv.system.forcing
    p, K1 = first.p.flat, first.K1.flat
    a1c = coef[0] + coef[1] * p[:S] + coef[2] * K1
    s1c = coef[3] + coef[4] * p[:S] + coef[5] * K1
    inc = fv.increments
    d = fv.solution
    ind_step = np.array([inc.indicator[step_slice(k)][0] for k in range(N)])
    inner = _stack(a1c, s1c, p[:S], K1, inc.dsigma, inc.delta, *coef, f[0], f[3], d.eta[0, :S], d.eta[1, :S],
                   d.zeta[0], d.zeta[1])
    if not direct:
        if sv is not None:
            raise InvalidArgument("the second variation needs the direct route")
        inner = inner[:6]
    X1, Y1, Z1 = np.zeros((M, N + 1)), np.zeros((M, N + 1)), np.zeros((M, N))
    X1d, Y1d, Z1d = np.zeros((M, N + 1)), np.zeros((M, N + 1)), np.zeros((M, N))
    two = sv is not None
    if two:
        s2 = sv.solution
        sys2 = sv.system
        P = second.P.flat
        inner2 = _stack(*sys2.forcing, *s2.eta[:, :S], *s2.zeta, P[:S], sv.Yhat.flat[:S])
        X2, Y2, Z2 = np.zeros((M, N + 1)), np.zeros((M, N + 1)), np.zeros((M, N))
        rel = np.zeros((M, N + 1))
    for k in range(N):
        sl = step_slice(k)
        xk = Xbar[:, k]
        F = tree.interpolate(inner[:, sl], k, xk)
        a1, s1, pk, Kk, dsg, Dk = F[:6]
        w = omega[:, k]
        # closed loop
        Y1[:, k] = pk * X1[:, k]
        Z1[:, k] = Kk * X1[:, k] + Dk
        X1[:, k + 1] = X1[:, k] + a1 * X1[:, k] * dt + (s1 * X1[:, k] + dsg) * r * w
        if not direct:
            continue
        c = F[6:15]
        f1, f2, ea, ec0, zK, zd0 = F[15:21]
        # direct
        x1 = X1d[:, k]
        Y1d[:, k] = ea * x1 + ec0
        Z1d[:, k] = zK * x1 + zd0
        dr = c[0] * x1 + c[1] * Y1d[:, k] + c[2] * Z1d[:, k] + f1
        vo = c[3] * x1 + c[4] * Y1d[:, k] + c[5] * Z1d[:, k] + f2
        X1d[:, k + 1] = x1 + dr * dt + vo * r * w
        if two:
            G = tree.interpolate(inner2[:, sl], k, xk)
            fr = G[:9]
            A, C0, C1, C2 = G[9:13]
            KK, D0, D1, D2 = G[13:17]
            Pk, Yhk = G[17:19]
            x2, chi = X2[:, k], X1d[:, k]
            Y2[:, k] = A * x2 + C0 + C1 * chi + C2 * chi * chi
            Z2[:, k] = KK * x2 + D0 + D1 * chi + D2 * chi * chi
            rel[:, k] = pk * x2 + 0.5 * Pk * chi * chi + Yhk
            F1 = fr[0] + fr[1] * chi + fr[2] * chi * chi
            F2 = fr[3] + fr[4] * chi + fr[5] * chi * chi
            dr2 = c[0] * x2 + c[1] * Y2[:, k] + c[2] * Z2[:, k] + F1
            vo2 = c[3] * x2 + c[4] * Y2[:, k] + c[5] * Z2[:, k] + F2
            X2[:, k + 1] = x2 + dr2 * dt + vo2 * r * w
    xN = Xbar[:, N]
    pT, aT, cT = tree.interpolate(_stack(p[S:], d.eta[0, S:], d.eta[1, S:]), N, xN)
    Y1[:, N] = pT * X1[:, N]
    Y1d[:, N] = aT * X1d[:, N] + cT
    if two:
        PT = tree.interpolate(second.P.flat[S:], N, xN)
        AT, C0T, C1T, C2T = tree.interpolate(s2.eta[:, S:], N, xN)
        chi = X1d[:, N]
        Y2[:, N] = AT * X2[:, N] + C0T + C1T * chi + C2T * chi * chi
        rel[:, N] = pT * X2[:, N] + 0.5 * PT * chi * chi
    else:
        X2 = Y2 = Z2 = rel = None
    return VariationPaths(Xbar, X1, Y1, Z1, X1d, Y1d, Z1d, X2, Y2, Z2, rel, ind_step > 0, weights)


@dataclass
class VariationBundle:
    first: FirstVariation
    second: SecondVariation | None
    paths: VariationPaths
    r_Y1: float
    r_Z1: float
    r_Y2: float
    r_Y1_fields: float
    r_Z1_fields: float

    @property
    def Y2_0(self) -> float:
        return float("nan") if self.second is None else self.second.Y2_0

    @property
    def Yhat0(self) -> float:
        return float("nan") if self.second is None else self.second.Yhat0

    def to_dict(self) -> dict:
        return {"r_Y1": self.r_Y1, "r_Z1": self.r_Z1, "r_Y2": self.r_Y2,
                "r_Y1_fields": self.r_Y1_fields, "r_Z1_fields": self.r_Z1_fields,
                "Y2_0": self.Y2_0, "Yhat0": self.Yhat0, "delta_residual": self.first.delta.residual,
                "delta_iterations": self.first.delta.iterations, "route": self.first.route}


def relation_residuals(vp: VariationPaths) -> tuple[float, float, float]:
    """sup |Y1 - p X1|, off-spike sup |Z1 - K1 X1| and sup |Y2 - p X2 - P X1^2/2 - Yhat|.

    Y1 and Z1 are from the direct route, p X1 and K1 X1 from the closed loop.
    """
    rY1 = float(np.max(np.abs(vp.Y1d - vp.Y1)))
    off = ~vp.spike_steps
    rZ1 = float(np.max(np.abs(vp.Z1d[:, off] - vp.Z1[:, off]))) if np.any(off) else 0.0
    rY2 = float("nan") if vp.Y2 is None else float(np.max(np.abs(vp.Y2 - vp.relation2)))
    return rY1, rZ1, rY2


def variation_bundle(problem, optimal: FbsdeSolution | None = None, paths: int = 1000, seed: int = 0,
                     route: str = "kernel", check_route: str | None = "picard",
                     second_order: bool = True) -> VariationBundle:
    """Solve the adjoints, Delta, both variational systems and the relation residuals for a problem."""
    coeffs = problem.coeffs
    tree = problem.tree
    if optimal is None:
        optimal = solve_coupled(coeffs, problem.candidate(), tree)
    first = solve_first_order_adjoint(coeffs, optimal, problem.beta0)
    second = solve_second_order_adjoint(coeffs, optimal, first)
    ind = spike_indicator(optimal, problem.spike)
    delta = solve_delta(coeffs, optimal, first.p_bar, problem.spike.u, ind, problem.beta0,
                        coeffs.lipschitz.L3)
    fv = solve_first_variation(coeffs, optimal, first, delta, problem.spike, route, check_route)
    sv = solve_second_variation(coeffs, optimal, first, second, fv, problem.spike, route) if second_order else None
    vp = variation_paths(coeffs, optimal, first, fv, sv, second, paths=paths, seed=seed)
    rY1, rZ1, rY2 = relation_residuals(vp)
    chk = fv.check if fv.check is not None else fv.solution
    off = ind == 0
    rY1f = float(max(np.max(np.abs(chk.eta[0] - first.p.flat)), np.max(np.abs(chk.eta[1]))))
    rZ1f = float(max(np.max(np.abs(chk.zeta[0] - first.K1.flat)), np.max(np.abs(chk.zeta[1][off]), initial=0.0)))
    return VariationBundle(fv, sv, vp, rY1, rZ1, rY2, rY1f, rZ1f)


# ---------------------------------------------------------------------------
# Orders in epsilon
# ---------------------------------------------------------------------------


@dataclass
class SlopeFit:
    name: str
    beta: float
    eps: list[float]
    values: list[float]
    slope: float
    r2: float


@dataclass
class SpikeOrderReport:
    N: int
    paths: int
    seed: int
    eps: list[float]
    fits: list[SlopeFit] = field(default_factory=list)
    exact: bool = False

    def fit(self, name: str, beta: float = 2) -> SlopeFit:
        for f in self.fits:
            if f.name == name and f.beta == beta:
                return f
        raise KeyError((name, beta))

    def rows(self) -> list[tuple[str, float, float, float]]:
        return [(f.name, f.beta, e, v) for f in self.fits for e, v in zip(f.eps, f.values)]

    def to_dict(self) -> dict:
        return {"N": self.N, "paths": self.paths, "seed": self.seed, "eps": self.eps, "exact": self.exact,
                "fits": [{"statistic": f.name, "beta": f.beta, "slope": f.slope, "r2": f.r2,
                          "values": f.values} for f in self.fits]}


def loglog_slope(eps, values) -> tuple[float, float]:
    """Least-squares slope of log(values) against log(eps) and its R^2."""
    lx, ly = np.log(np.asarray(eps, dtype=float)), np.log(np.asarray(values, dtype=float))
    if not np.all(np.isfinite(ly)):
        return float("nan"), float("nan")
    slope, icpt = np.polyfit(lx, ly, 1)
    fit = slope * lx + icpt
    ss = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum((ly - fit) ** 2)) / ss if ss > 0 else 1.0
    return float(slope), float(r2)


def estimate_spike_orders(problem, eps_list=None, paths: int = 100_000, seed: int = 0,
                          betas=(2, 4), N: int | None = None) -> SpikeOrderReport:
    """Moments of the spike perturbation and of the expansion remainders against eps.

    Statistics: E sup|X^e - X|^b, E sup|Y^e - Y|^b, E (int |Z^e - Z|^2 dt)^(b/2),
    E sup|X^e - X - X1|^2 and |Y^e(0) - Y(0) - Y1(0) - Y2(0)|.  Common sign
    paths are used for every eps; with at most 2^14 leaf paths the expectation
    is exact on the tree.
    """
    if N is not None:
        problem = problem.with_steps(N)
    grid = problem.grid
    T = grid.T
    eps_list = [T / m for m in DEFAULT_EPS_FRACTIONS] if eps_list is None else [float(e) for e in eps_list]
    if len(eps_list) < 3:
        raise InvalidArgument("need at least three eps values for a slope")
    if any(e < grid.dt * (1 - 1e-12) for e in eps_list):
        raise InvalidArgument("every eps must resolve at least one grid step")
    coeffs = problem.coeffs
    tree = problem.tree
    ubar = problem.candidate()
    optimal = solve_coupled(coeffs, ubar, tree)
    first = solve_first_order_adjoint(coeffs, optimal, problem.beta0)
    second = solve_second_order_adjoint(coeffs, optimal, first)
    omega, weights = path_signs(grid.N, paths, seed)
    Xb, Yb, Zb = simulate_paths(coeffs, optimal, omega)
    stats: dict[tuple[str, float], list[float]] = {}

    def put(name, beta, v):
        stats.setdefault((name, beta), []).append(float(v))

    t0 = problem.spike.t0
    for eps in eps_list:
        spike = SpikeSpec(t0, eps, problem.spike.u)
        steps = spike.steps(grid)
        pert = solve_coupled(coeffs, make_spike_control(ubar, spike, grid), tree, reuse=(optimal, steps[-1] + 1))
        Xe, Ye, Ze = simulate_paths(coeffs, pert, omega)
        ind = spike_indicator(optimal, spike)
        delta = solve_delta(coeffs, optimal, first.p_bar, spike.u, ind, problem.beta0, coeffs.lipschitz.L3)
        fv = solve_first_variation(coeffs, optimal, first, delta, spike, "kernel", None)
        sv = solve_second_variation(coeffs, optimal, first, second, fv, spike, "kernel")
        vp = variation_paths(coeffs, optimal, first, fv, omega=omega, weights=weights, Xbar=Xb, direct=False)
        dX = np.max(np.abs(Xe - Xb), axis=1)
        dY = np.max(np.abs(Ye - Yb), axis=1)
        dZ = np.sum((Ze - Zb) ** 2, axis=1) * grid.dt
        rX = np.max(np.abs(Xe - Xb - vp.X1), axis=1)
        for b in betas:
            put("X", b, weights @ dX ** b)
            put("Y", b, weights @ dY ** b)
            put("Z", b, weights @ dZ ** (b / 2))
        put("X-X1", 2, weights @ rX ** 2)
        put("Y0-Y1-Y2", 1, abs(pert.Y0 - optimal.Y0 - sv.Y2_0))
    report = SpikeOrderReport(grid.N, int(omega.shape[0]), seed, eps_list, exact=grid.N <= 14)
    for (name, beta), vals in stats.items():
        s, r2 = loglog_slope(eps_list, vals)
        report.fits.append(SlopeFit(name, beta, eps_list, vals, s, r2))
    return report


__all__ = [
    "DeltaProcess", "delta_fixed_point", "delta_linear_z", "delta_residual", "solve_delta",
    "make_spike_control", "spike_indicator", "FirstVariation", "SecondVariation", "solve_first_variation",
    "solve_second_variation", "VariationPaths", "variation_paths", "VariationBundle", "relation_residuals",
    "variation_bundle", "SlopeFit", "SpikeOrderReport", "loglog_slope", "estimate_spike_orders",
]
