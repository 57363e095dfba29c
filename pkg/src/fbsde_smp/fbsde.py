"""Decoupled and fully coupled FBSDE solvers on the lattice, plus a linear ODE oracle.

A solution is stored as decoupling fields: Y(k, x) and Z(k, x) on the lattice
nodes of step k.  From a node the forward state moves to
``x + b dt +/- sigma sqrt(dt)`` and the step-(k+1) fields are evaluated there by
cubic interpolation.  Three coupled solvers share this representation:

* ``solve_coupled`` resolves the coupling locally, node by node, with a joint
  fixed point in (Y, Z) (fast; the default).
* ``solve_coupled_picard`` iterates global sweeps in which (y, z) are frozen
  in the forward coefficients, each sweep being ``solve_decoupled``.
* ``solve_linear_oracle`` integrates the Riccati-type ODE of the linear case.

The module also carries the generic linear solver used by the variational and
adjoint systems (``LinearLatticeSystem``), in a direct form (compiled kernel)
and a Picard form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import sympy as sp

from . import kernels
from .core import (SYMBOLS, BrownianTree, CoefficientModel, Control, InvalidArgument, Lipschitz,
                   NumericDivergence, SingularityError, TreeProcess)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200
LOCAL_TOL = 1e-13
INNER_MAX_ITER = 100


class ContractionFailure(NumericDivergence):
    """Picard iteration did not reach the tolerance; carries the residual history."""

    def __init__(self, message: str, history: Sequence[float]):
        h = list(history)
        ratios = [b / a for a, b in zip(h, h[1:]) if a > 0]
        super().__init__(f"{message}; last residuals {h[-3:]}, last ratio "
                         f"{ratios[-1] if ratios else float('nan'):.3g}")
        self.history = h


# ---------------------------------------------------------------------------
# Lattice helpers
# ---------------------------------------------------------------------------


def inner_size(tree: BrownianTree) -> int:
    return tree.offset(tree.N)


def node_coordinates(tree: BrownianTree, last: int | None = None) -> np.ndarray:
    last = tree.N if last is None else last
    return np.concatenate([tree.nodes(k) for k in range(last + 1)])


def node_times(tree: BrownianTree, last: int | None = None) -> np.ndarray:
    last = tree.N if last is None else last
    return np.concatenate([np.full(k + 1, tree.grid.t(k)) for k in range(last + 1)])


def step_slice(k: int) -> slice:
    return slice(k * (k + 1) // 2, (k + 1) * (k + 2) // 2)


def control_values(control, tree: BrownianTree) -> np.ndarray:
    """Control value at every node of steps 0..N-1 (flat)."""
    if isinstance(control, (int, float)):
        return np.full(inner_size(tree), float(control))
    if isinstance(control, TreeProcess):
        if control.last < tree.N - 1:
            raise InvalidArgument("control process must cover steps 0..N-1")
        return control.flat[:inner_size(tree)].copy()
    if isinstance(control, Control):
        if control.N is not None and control.N != tree.N:
            raise InvalidArgument(f"control has {control.N} steps, tree has {tree.N}")
        return np.concatenate([control.at(k, tree.grid.t(k), tree.nodes(k)) for k in range(tree.N)])
    raise InvalidArgument(f"unsupported control type {type(control).__name__}")


def child_stencils_flat(tree: BrownianTree, xp: np.ndarray, xm: np.ndarray):
    """Stencils of all up/down children, indexed locally within step k+1."""
    sp_, wp, sm, wm = [], [], [], []
    for k in range(tree.N):
        sl = step_slice(k)
        a, b = tree.child_stencils(k, xp[sl])
        c, d = tree.child_stencils(k, xm[sl])
        sp_.append(a); wp.append(b); sm.append(c); wm.append(d)
    return (np.concatenate(sp_), np.ascontiguousarray(np.concatenate(wp)),
            np.concatenate(sm), np.ascontiguousarray(np.concatenate(wm)))


@dataclass
class FbsdeSolution:
    """Decoupling fields of a solved FBSDE on the lattice.

    ``X`` holds the node coordinates, ``Y`` the value field on steps 0..N and
    ``Z`` the martingale integrand on steps 0..N-1.  ``xp``/``xm`` are the up and
    down children of every node of steps 0..N-1 and ``u`` the control there.
    """

    tree: BrownianTree
    X: TreeProcess
    Y: TreeProcess
    Z: TreeProcess
    u: np.ndarray
    xp: np.ndarray | None = None
    xm: np.ndarray | None = None
    picard_iterations: int = 0
    final_residual: float = 0.0
    residual_history: list[float] = field(default_factory=list)

    @property
    def Y0(self) -> float:
        return float(self.Y.flat[0])

    def stencils(self):
        if self.xp is None:
            raise InvalidArgument("solution carries no child positions")
        return child_stencils_flat(self.tree, self.xp, self.xm)

    def to_rows(self) -> list[tuple[int, int, float, float, float]]:
        rows = []
        for k in range(self.tree.N + 1):
            xs, ys = self.X.step(k), self.Y.step(k)
            zs = self.Z.step(k) if k < self.tree.N else np.full(k + 1, np.nan)
            rows += [(k, j, float(xs[j]), float(ys[j]), float(zs[j])) for j in range(k + 1)]
        return rows


def _terminal(coeffs: CoefficientModel, tree: BrownianTree) -> np.ndarray:
    return np.array(coeffs.phi(tree.nodes(tree.N)), dtype=float)


def _implicit_y(coeffs: CoefficientModel, t, x, ybar, z, u, dt: float) -> np.ndarray:
    y = ybar.copy()
    for _ in range(INNER_MAX_ITER):
        y_new = ybar + coeffs.g(t, x, y, z, u) * dt
        if np.max(np.abs(y_new - y), initial=0.0) <= 1e-14 * (1.0 + np.max(np.abs(y_new), initial=0.0)):
            return y_new
        y = y_new
    raise NumericDivergence(f"implicit Y solve did not converge in {INNER_MAX_ITER} iterations")


# ---------------------------------------------------------------------------
# Nonlinear solvers
# ---------------------------------------------------------------------------


def solve_decoupled(coeffs: CoefficientModel, y_in: TreeProcess, z_in: TreeProcess, control,
                    tree: BrownianTree, x0: float | None = None) -> FbsdeSolution:
    """One sweep: forward coefficients frozen at (y_in, z_in), then backward induction.

    The backward step solves Y = E[Y(k+1)] + g(t, x, Y, Z) dt implicitly in Y,
    with Z the difference quotient of the children.
    """
    if x0 is not None and abs(x0 - tree.x0) > 0:
        raise InvalidArgument("x0 must equal the lattice root")
    N, dt, r = tree.N, tree.grid.dt, tree.grid.sqrt_dt
    S = inner_size(tree)
    if y_in.flat.size < S or z_in.flat.size < S:
        raise InvalidArgument("frozen inputs must cover steps 0..N-1")
    u = control_values(control, tree)
    x = node_coordinates(tree, N - 1)
    t = node_times(tree, N - 1)
    yi, zi = y_in.flat[:S], z_in.flat[:S]
    b = coeffs.b(t, x, yi, zi, u)
    s = coeffs.sigma(t, x, yi, zi, u)
    xp, xm = x + b * dt + s * r, x + b * dt - s * r
    Y = np.empty(tree.size)
    Z = np.empty(S)
    Y[S:] = _terminal(coeffs, tree)
    for k in range(N - 1, -1, -1):
        sl, nx = step_slice(k), step_slice(k + 1)
        vals = Y[nx]
        vp = tree.interpolate(vals, k + 1, xp[sl])
        vm = tree.interpolate(vals, k + 1, xm[sl])
        Z[sl] = (vp - vm) / (2 * r)
        Y[sl] = _implicit_y(coeffs, t[sl], x[sl], 0.5 * (vp + vm), Z[sl], u[sl], dt)
    return FbsdeSolution(tree, TreeProcess(tree, node_coordinates(tree)), TreeProcess(tree, Y),
                         TreeProcess(tree, Z, N - 1), u, xp, xm, 1, 0.0, [])


def picard_residual(tree: BrownianTree, dY: np.ndarray, dZ: np.ndarray) -> float:
    """sup |dY| + sqrt(sum_k dt max_j |dZ_k|^2)."""
    zmax = np.array([np.max(np.abs(dZ[step_slice(k)])) for k in range(tree.N)])
    return float(np.max(np.abs(dY)) + math.sqrt(tree.grid.dt * np.sum(zmax ** 2)))


def solve_coupled_picard(coeffs: CoefficientModel, control, tree: BrownianTree, x0: float | None = None,
                         tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> FbsdeSolution:
    """Global Picard iteration over decoupled sweeps, started from (y, z) = (0, 0)."""
    S = inner_size(tree)
    Yk = TreeProcess(tree)
    Zk = TreeProcess(tree, np.zeros(S), tree.N - 1)
    history: list[float] = []
    for it in range(1, max_iter + 1):
        sol = solve_decoupled(coeffs, Yk, Zk, control, tree, x0)
        res = picard_residual(tree, sol.Y.flat - Yk.flat, sol.Z.flat - Zk.flat)
        history.append(res)
        if not math.isfinite(res):
            raise ContractionFailure("Picard iteration produced non-finite values", history)
        if res < tol:
            sol.picard_iterations, sol.final_residual, sol.residual_history = it, res, history
            return sol
        Yk, Zk = sol.Y, sol.Z
    raise ContractionFailure(f"Picard iteration did not reach {tol:g} in {max_iter} sweeps", history)


def solve_coupled(coeffs: CoefficientModel, control, tree: BrownianTree, tol: float = LOCAL_TOL,
                  max_iter: int = DEFAULT_MAX_ITER, reuse: tuple[FbsdeSolution, int] | None = None
                  ) -> FbsdeSolution:
    """Coupled solve with the coupling resolved node by node.

    At each node the pair (y, z) is the fixed point of
    y = E[theta(k+1, X+/-)] + g(y, z) dt and z = difference quotient, where the
    children X+/- depend on (y, z).  ``reuse=(base, k1)`` copies the fields of
    ``base`` on steps >= k1 (valid when both controls agree there).
    """
    N, dt, r = tree.N, tree.grid.dt, tree.grid.sqrt_dt
    S = inner_size(tree)
    u = control_values(control, tree)
    x = node_coordinates(tree, N - 1)
    t = node_times(tree, N - 1)
    Y = np.empty(tree.size)
    Z = np.empty(S)
    xp = np.empty(S)
    xm = np.empty(S)
    start = N - 1
    if reuse is not None:
        base, k1 = reuse
        k1 = int(min(max(k1, 0), N))
        off = tree.offset(k1)
        Y[off:] = base.Y.flat[off:]
        Z[off:] = base.Z.flat[off:]
        xp[off:], xm[off:] = base.xp[off:], base.xm[off:]
        start = k1 - 1
    else:
        Y[S:] = _terminal(coeffs, tree)
    worst_iter = 0
    for k in range(start, -1, -1):
        sl, nx = step_slice(k), step_slice(k + 1)
        vals = Y[nx]
        tk, xk, uk = t[sl], x[sl], u[sl]
        def fmap(y, z):
            b = coeffs.b(tk, xk, y, z, uk)
            s = coeffs.sigma(tk, xk, y, z, uk)
            vp = tree.interpolate(vals, k + 1, xk + b * dt + s * r)
            vm = tree.interpolate(vals, k + 1, xk + b * dt - s * r)
            z_new = (vp - vm) / (2 * r)
            return 0.5 * (vp + vm) + coeffs.g(tk, xk, y, z_new, uk) * dt, z_new

        y = tree.interpolate(vals, k + 1, xk)
        z = np.zeros_like(xk)
        for it in range(max_iter):
            ty, tz = fmap(y, z)
            fy, fz = ty - y, tz - z
            if not np.all(np.isfinite(ty)):
                raise NumericDivergence(f"non-finite values at step {k}")
            if max(np.max(np.abs(fy)), np.max(np.abs(fz))) <= tol * (1.0 + max(np.max(np.abs(ty)),
                                                                                np.max(np.abs(tz)))):
                y, z = ty, tz
                break
            # Newton step on v - T(v) with a finite-difference Jacobian; the plain
            # fixed-point step (a contraction) is kept wherever Newton does not help
            hy, hz = 1e-7 * (1.0 + np.abs(y)), 1e-7 * (1.0 + np.abs(z))
            ay, az = fmap(y + hy, z)
            by, bz = fmap(y, z + hz)
            j11, j12 = (ay - ty) / hy - 1.0, (by - ty) / hz
            j21, j22 = (az - tz) / hy, (bz - tz) / hz - 1.0
            det = j11 * j22 - j12 * j21
            with np.errstate(divide="ignore", invalid="ignore"):
                dy = (-fy * j22 + j12 * fz) / det
                dz = (-j11 * fz + j21 * fy) / det
            step = np.abs(dy) + np.abs(dz)
            ok = np.isfinite(step) & (step <= 10.0 * (np.abs(fy) + np.abs(fz)) + 1e-300)
            y = np.where(ok, y + np.where(ok, dy, 0.0), ty)
            z = np.where(ok, z + np.where(ok, dz, 0.0), tz)
        else:
            raise NumericDivergence(f"local fixed point failed at step {k} after {max_iter} iterations")
        worst_iter = max(worst_iter, it + 1)
        b = coeffs.b(tk, xk, y, z, uk)
        s = coeffs.sigma(tk, xk, y, z, uk)
        xp[sl], xm[sl] = xk + b * dt + s * r, xk + b * dt - s * r
        Y[sl], Z[sl] = y, z
    return FbsdeSolution(tree, TreeProcess(tree, node_coordinates(tree)), TreeProcess(tree, Y),
                         TreeProcess(tree, Z, N - 1), u, xp, xm, worst_iter, 0.0, [])


# ---------------------------------------------------------------------------
# Linear oracle
# ---------------------------------------------------------------------------

LINEAR_NAMES = ("alpha1", "beta1", "gamma1", "alpha2", "beta2", "gamma2", "alpha3", "beta3", "gamma3",
                "L1", "L2", "L3")


@dataclass(frozen=True)
class LinearFbsdeSpec:
    """dX = (a1 X + b1 Y + g1 Z + L1) dt + (a2 X + b2 Y + g2 Z + L2) dB,
    -dY = (a3 X + b3 Y + g3 Z + L3) dt - Z dB, Y(T) = kappa X(T), with
    deterministic coefficients given as expressions in t."""

    exprs: Mapping[str, str]
    kappa: float
    x0: float

    def __post_init__(self) -> None:
        missing = set(LINEAR_NAMES) - set(self.exprs)
        if missing:
            raise InvalidArgument(f"linear spec lacks {sorted(missing)}")
        t = SYMBOLS[0]
        for name in LINEAR_NAMES:
            e = sp.sympify(self.exprs[name], locals={"t": t})
            if e.free_symbols - {t}:
                raise InvalidArgument(f"linear coefficient {name} may depend on t only")
        fns = self.functions()
        ts = np.linspace(0.0, 10.0, 101)
        if not all(np.all(np.isfinite(f(ts))) for f in fns.values()):
            raise InvalidArgument("linear coefficients must be finite")

    @classmethod
    def from_strings(cls, exprs: Mapping[str, str], kappa, x0: float) -> "LinearFbsdeSpec":
        return cls({k: str(v) for k, v in exprs.items() if k in LINEAR_NAMES}, float(sp.sympify(kappa)), float(x0))

    def functions(self) -> dict:
        t = SYMBOLS[0]
        out = {}
        for name in LINEAR_NAMES:
            f = sp.lambdify(t, sp.sympify(self.exprs[name], locals={"t": t}), modules="numpy")
            out[name] = (lambda f_: lambda s: np.broadcast_to(np.asarray(f_(s), float), np.shape(s)))(f)
        return out

    def to_model(self, lipschitz: Lipschitz | None = None) -> CoefficientModel:
        e = self.exprs
        spec = {
            "b": f"({e['alpha1']})*x + ({e['beta1']})*y + ({e['gamma1']})*z + ({e['L1']})",
            "sigma": f"({e['alpha2']})*x + ({e['beta2']})*y + ({e['gamma2']})*z + ({e['L2']})",
            "g": f"({e['alpha3']})*x + ({e['beta3']})*y + ({e['gamma3']})*z + ({e['L3']})",
            "phi": f"({self.kappa})*x",
        }
        return CoefficientModel.from_strings(spec, lipschitz or Lipschitz())


def linear_oracle_odes(spec: LinearFbsdeSpec, T: float, N: int, min_fine: int = 4000):
    """RK4 (backward) for the slope p and the offset phi of Y = p X + phi.

    Returns (t, p, phi) at the N+1 grid times.
    """
    f = spec.functions()
    sub = max(1, math.ceil(min_fine / N))
    n = sub * N
    h = T / n

    def rhs(s, v):
        p, ph = v
        a1, b1, g1 = f["alpha1"](s), f["beta1"](s), f["gamma1"](s)
        a2, b2, g2 = f["alpha2"](s), f["beta2"](s), f["gamma2"](s)
        a3, b3, g3 = f["alpha3"](s), f["beta3"](s), f["gamma3"](s)
        l1, l2, l3 = f["L1"](s), f["L2"](s), f["L3"](s)
        den = 1.0 - p * g2
        if abs(den) < 1e-8:
            raise SingularityError(f"1 - p gamma2 = {den:.3g} at t = {s:.6g}")
        K = (a2 * p + b2 * p * p) / den
        A = a3 + b3 * p + g3 * K + a1 * p + b1 * p * p + g1 * K * p
        C = (b1 * p + b3) * ph + p * l1 + l3 + (g1 * p + g3) * (b2 * p * ph + p * l2) / den
        return np.array([A, C])  # = -d/dt

    v = np.array([spec.kappa, 0.0])
    out = np.empty((2, N + 1))
    out[:, N] = v
    for i in range(n, 0, -1):
        s = i * h
        k1 = rhs(s, v)
        k2 = rhs(s - 0.5 * h, v + 0.5 * h * k1)
        k3 = rhs(s - 0.5 * h, v + 0.5 * h * k2)
        k4 = rhs(s - h, v + h * k3)
        v = v + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if (i - 1) % sub == 0:
            out[:, (i - 1) // sub] = v
    rhs(0.0, v)  # singularity check at t = 0
    return np.linspace(0.0, T, N + 1), out[0], out[1]


def solve_linear_oracle(spec: LinearFbsdeSpec, tree: BrownianTree) -> FbsdeSolution:
    """Y = p X + phi and Z from the closed-loop formula, evaluated on the lattice nodes."""
    if abs(spec.x0 - tree.x0) > 1e-15:
        raise InvalidArgument("lattice root must equal the spec's x0")
    N = tree.N
    ts, p, ph = linear_oracle_odes(spec, tree.grid.T, N)
    f = spec.functions()
    Y = np.concatenate([p[k] * tree.nodes(k) + ph[k] for k in range(N + 1)])
    Zs = []
    for k in range(N):
        s = ts[k]
        den = 1.0 - p[k] * f["gamma2"](s)
        Zs.append(((f["alpha2"](s) * p[k] + f["beta2"](s) * p[k] ** 2) * tree.nodes(k)
                   + p[k] * f["beta2"](s) * ph[k] + p[k] * f["L2"](s)) / den)
    S = inner_size(tree)
    return FbsdeSolution(tree, TreeProcess(tree, node_coordinates(tree)), TreeProcess(tree, Y),
                         TreeProcess(tree, np.concatenate(Zs), N - 1), np.zeros(S))


# ---------------------------------------------------------------------------
# Generic linear system with polynomial forcing
# ---------------------------------------------------------------------------


@dataclass
class LinearLatticeSystem:
    """Linear FBSDE on a solved lattice: forward xi, backward (eta, zeta).

    d xi   = (a1 xi + b1 eta + g1 zeta + f1(chi)) dt + (a2 xi + b2 eta + g2 zeta + f2(chi)) dB
    -d eta = (a3 xi + b3 eta + g3 zeta + f3(chi)) dt - zeta dB

    ``coef`` rows are a1, b1, g1, a2, b2, g2, a3, b3, g3 on the nodes of steps
    0..N-1; ``forcing`` rows are the degree 0, 1, 2 coefficients of f1, f2, f3
    in an auxiliary state chi with chi -> lam chi + mu on the up/down branch.
    ``terminal`` rows give eta(T) = a xi + c0 + c1 chi + c2 chi^2 per leaf.
    """

    tree: BrownianTree
    xp: np.ndarray
    xm: np.ndarray
    coef: np.ndarray
    forcing: np.ndarray
    terminal: np.ndarray
    lam_p: np.ndarray | None = None
    lam_m: np.ndarray | None = None
    mu_p: np.ndarray | None = None
    mu_m: np.ndarray | None = None
    _stencils: tuple | None = None

    def __post_init__(self) -> None:
        S = inner_size(self.tree)
        if self.coef.shape != (9, S) or self.forcing.shape != (9, S):
            raise InvalidArgument("coefficient and forcing arrays must have shape (9, inner nodes)")
        if self.terminal.shape != (4, self.tree.N + 1):
            raise InvalidArgument("terminal array must have shape (4, N+1)")
        one, zero = np.ones(S), np.zeros(S)
        self.lam_p = one if self.lam_p is None else self.lam_p
        self.lam_m = one if self.lam_m is None else self.lam_m
        self.mu_p = zero if self.mu_p is None else self.mu_p
        self.mu_m = zero if self.mu_m is None else self.mu_m

    def stencils(self):
        if self._stencils is None:
            self._stencils = child_stencils_flat(self.tree, self.xp, self.xm)
        return self._stencils


@dataclass
class LinearLatticeSolution:
    tree: BrownianTree
    eta: np.ndarray   # (4, total): a, c0, c1, c2
    zeta: np.ndarray  # (4, inner): K, d0, d1, d2
    iterations: int = 1
    residual_history: list[float] = field(default_factory=list)

    def eta_step(self, k: int) -> np.ndarray:
        return self.eta[:, step_slice(k)]

    def zeta_step(self, k: int) -> np.ndarray:
        return self.zeta[:, step_slice(k)]

    def value0(self, xi0: float = 0.0, chi0: float = 0.0) -> float:
        a, c0, c1, c2 = self.eta[:, 0]
        return float(a * xi0 + c0 + c1 * chi0 + c2 * chi0 * chi0)


def solve_linear_lattice(system: LinearLatticeSystem) -> LinearLatticeSolution:
    """Direct backward sweep (one 2x2 solve per node and degree), compiled kernel."""
    sp_, wp, sm, wm = system.stencils()
    tree = system.tree
    c = np.ascontiguousarray
    eta, zeta = kernels.poly_backward(tree.N, tree.grid.dt, c(sp_), c(wp), c(sm), c(wm), c(system.coef),
                                      c(system.forcing), c(system.lam_p), c(system.lam_m), c(system.mu_p),
                                      c(system.mu_m), c(system.terminal, dtype=float))
    return LinearLatticeSolution(tree, np.asarray(eta), np.asarray(zeta))


def solve_linear_lattice_picard(system: LinearLatticeSystem, tol: float = 1e-13,
                                max_iter: int = DEFAULT_MAX_ITER) -> LinearLatticeSolution:
    """Markovian Picard sweeps: (eta, zeta) frozen in the forward coefficients.

    Independent of the direct kernel; both converge to the same lattice fixed point.
    """
    tree = system.tree
    N, dt, r = tree.N, tree.grid.dt, tree.grid.sqrt_dt
    S = inner_size(tree)
    sp_, wp, sm, wm = system.stencils()
    a1, b1, g1, a2, b2, g2, a3, b3, g3 = system.coef
    f = system.forcing
    eta_in = np.zeros((4, tree.size))
    zeta_in = np.zeros((4, S))
    history: list[float] = []
    for it in range(1, max_iter + 1):
        eta = np.zeros((4, tree.size))
        zeta = np.zeros((4, S))
        eta[:, S:] = system.terminal
        # forward coefficients as polynomials in (xi, chi)
        Dx = a1 + b1 * eta_in[0, :S] + g1 * zeta_in[0]
        Sx = a2 + b2 * eta_in[0, :S] + g2 * zeta_in[0]
        Dm = [b1 * eta_in[1 + m, :S] + g1 * zeta_in[1 + m] + f[m] for m in range(3)]
        Sm = [b2 * eta_in[1 + m, :S] + g2 * zeta_in[1 + m] + f[3 + m] for m in range(3)]
        for k in range(N - 1, -1, -1):
            sl, nx = step_slice(k), step_slice(k + 1)
            vp = kernels.gather(eta[:, nx], sp_[sl], wp[sl])
            vm = kernels.gather(eta[:, nx], sm[sl], wm[sl])
            A = 0.5 * (vp[0] + vm[0])
            At = (vp[0] - vm[0]) / (2 * r)
            den = 1.0 - b3[sl] * dt
            zeta[0, sl] = At * (1 + Dx[sl] * dt) + A * Sx[sl]
            eta[0, sl] = (A * (1 + Dx[sl] * dt) + At * Sx[sl] * dt + (a3[sl] + g3[sl] * zeta[0, sl]) * dt) / den
            lp, lm, mp, mm = system.lam_p[sl], system.lam_m[sl], system.mu_p[sl], system.mu_m[sl]
            plus = (vp[1] + vp[2] * mp + vp[3] * mp * mp, vp[2] * lp + 2 * vp[3] * lp * mp, vp[3] * lp * lp)
            minus = (vm[1] + vm[2] * mm + vm[3] * mm * mm, vm[2] * lm + 2 * vm[3] * lm * mm, vm[3] * lm * lm)
            for m in range(3):
                E = 0.5 * (plus[m] + minus[m])
                Dq = (plus[m] - minus[m]) / (2 * r)
                zeta[1 + m, sl] = At * Dm[m][sl] * dt + A * Sm[m][sl] + Dq
                eta[1 + m, sl] = (A * Dm[m][sl] * dt + At * Sm[m][sl] * dt + E
                                  + (f[6 + m, sl] + g3[sl] * zeta[1 + m, sl]) * dt) / den
        dY = np.max(np.abs(eta - eta_in), axis=0)
        dZ = np.max(np.abs(zeta - zeta_in), axis=0)
        res = picard_residual(tree, dY, dZ)
        history.append(res)
        eta_in, zeta_in = eta, zeta
        if not math.isfinite(res):
            raise ContractionFailure("linear Picard iteration produced non-finite values", history)
        if res < tol * (1.0 + np.max(np.abs(eta))):
            return LinearLatticeSolution(tree, eta, zeta, it, history)
    raise ContractionFailure(f"linear Picard iteration did not reach {tol:g}", history)


def evaluate_poly(sol: LinearLatticeSolution, k: int, x: np.ndarray, xi: np.ndarray, chi: np.ndarray,
                  which: str = "eta") -> np.ndarray:
    """Field value a xi + c0 + c1 chi + c2 chi^2 at off-node points x of step k."""
    tree = sol.tree
    coeffs = sol.eta_step(k) if which == "eta" else sol.zeta_step(k)
    a, c0, c1, c2 = tree.interpolate(np.ascontiguousarray(coeffs), k, x)
    return a * xi + c0 + c1 * chi + c2 * chi * chi


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


def path_signs(N: int, paths: int, seed: int = 0, exact_limit: int = 14) -> tuple[np.ndarray, np.ndarray]:
    """Random-walk signs (M, N) and path weights.

    When N <= ``exact_limit`` all 2^N paths are enumerated with equal weights,
    which makes path expectations exact on the tree; otherwise ``paths`` Monte
    Carlo paths are drawn with the given seed.
    """
    if N <= exact_limit:
        idx = np.arange(2 ** N)[:, None]
        omega = np.where((idx >> np.arange(N)[None, :]) & 1, 1.0, -1.0)
        return omega, np.full(2 ** N, 2.0 ** -N)
    if paths < 1:
        raise InvalidArgument("need at least one path")
    rng = np.random.default_rng(seed)
    omega = np.where(rng.random((paths, N)) < 0.5, -1.0, 1.0)
    return omega, np.full(paths, 1.0 / paths)


def simulate_paths(coeffs: CoefficientModel, sol: FbsdeSolution, omega: np.ndarray):
    """Forward state along sign paths with Y, Z read from the decoupling fields.

    Returns X (M, N+1), Y (M, N+1) and Z (M, N).
    """
    tree = sol.tree
    N, dt, r = tree.N, tree.grid.dt, tree.grid.sqrt_dt
    M = omega.shape[0]
    X = np.empty((M, N + 1))
    Y = np.empty((M, N + 1))
    Z = np.empty((M, N))
    X[:, 0] = tree.x0
    for k in range(N):
        xk = X[:, k]
        yz = tree.interpolate(np.vstack([sol.Y.step(k), sol.Z.step(k)]), k, xk)
        Y[:, k], Z[:, k] = yz
        us = sol.u[step_slice(k)]
        uk = us[0] if np.all(us == us[0]) else np.interp(xk, tree.nodes(k), us)
        tk = tree.grid.t(k)
        b = coeffs.b(tk, xk, Y[:, k], Z[:, k], uk)
        s = coeffs.sigma(tk, xk, Y[:, k], Z[:, k], uk)
        X[:, k + 1] = xk + b * dt + s * r * omega[:, k]
    Y[:, N] = coeffs.phi(X[:, N])
    return X, Y, Z
