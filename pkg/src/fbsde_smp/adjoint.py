"""First- and second-order adjoint processes on the optimal lattice.

Every recursion here is the lattice form of a BSDE whose generator depends on
(p, K1) or (P, K2) linearly once the children are known, so each node solves a
2x2 linear system.  With ``pbar`` and ``ptil`` the average and the difference
quotient of p over the two children, and q := ptil, the first-order step reads

    K1 = ptil (1 + D dt) + pbar S
    p  = pbar (1 + D dt) + ptil S dt + (g_x + g_y p + g_z K1) dt

with D = b_x + b_y p + b_z K1 and S = sigma_x + sigma_y p + sigma_z K1.  This
is exactly the one-step propagation of the first variational equation, so the
relation Y1 = p X1 holds on the lattice up to rounding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import CoefficientModel, InvalidArgument, Jet, SingularityError, SpikeSpec, TreeProcess
from .fbsde import FbsdeSolution, inner_size, node_coordinates, node_times, step_slice
from . import kernels


def optimal_jet(coeffs: CoefficientModel, optimal: FbsdeSolution, order: int = 2) -> Jet:
    """Values and derivatives of b, sigma, g along the optimal fields (steps 0..N-1)."""
    tree = optimal.tree
    S = inner_size(tree)
    return coeffs.jet(node_times(tree, tree.N - 1), node_coordinates(tree, tree.N - 1), optimal.Y.flat[:S],
                      optimal.Z.flat, optimal.u, order=order)


def _children(values_next: np.ndarray, stencils, sl: slice, r: float):
    sp_, wp, sm, wm = stencils
    vp = kernels.gather(values_next, sp_[sl], wp[sl])
    vm = kernels.gather(values_next, sm[sl], wm[sl])
    return 0.5 * (vp + vm), (vp - vm) / (2.0 * r)


def _solve2(m11, m12, m21, m22, r1, r2):
    det = m11 * m22 - m12 * m21
    return (r1 * m22 - m12 * r2) / det, (m11 * r2 - m21 * r1) / det


@dataclass
class AdjointBundle:
    """p on all steps; q, K1, pbar on steps 0..N-1.

    ``K1_formula`` is (sigma_x p + sigma_y p^2 + q) / (1 - p sigma_z) from the
    node values; it agrees with the lattice K1 to O(dt).
    """

    p: TreeProcess
    q: TreeProcess
    K1: TreeProcess
    p_bar: np.ndarray
    K1_formula: np.ndarray
    bound_used: float
    max_abs_q: float
    min_margin: float
    jet: Jet
    stencils: tuple

    @property
    def q_bounded_assumed(self) -> bool:
        return bool(np.isfinite(self.max_abs_q))


@dataclass
class SecondOrderBundle:
    P: TreeProcess
    Q: TreeProcess
    K2: TreeProcess


def solve_first_order_adjoint(coeffs: CoefficientModel, optimal: FbsdeSolution, beta0: float = 0.5,
                              bound: float = float("nan"), jet: Jet | None = None) -> AdjointBundle:
    """Backward induction of the quadratic adjoint BSDE with p(T) = phi_x(X(T)).

    Raises SingularityError where |1 - p sigma_z| < beta0 / 2.
    """
    tree = optimal.tree
    N, dt, r = tree.N, tree.grid.dt, tree.grid.sqrt_dt
    S = inner_size(tree)
    jet = optimal_jet(coeffs, optimal) if jet is None else jet
    st = optimal.stencils()
    p = np.empty(tree.size)
    K1 = np.empty(S)
    pbar = np.empty(S)
    ptil = np.empty(S)
    p[S:] = coeffs.phi(tree.nodes(N), 1)
    for k in range(N - 1, -1, -1):
        sl, nx = step_slice(k), step_slice(k + 1)
        pb, pt = _children(p[nx], st, sl, r)
        bx, by, bz = jet.b_x[sl], jet.b_y[sl], jet.b_z[sl]
        sx, sy, sz = jet.sigma_x[sl], jet.sigma_y[sl], jet.sigma_z[sl]
        gx, gy, gz = jet.g_x[sl], jet.g_y[sl], jet.g_z[sl]
        m11 = 1.0 - (pb * by + pt * sy + gy) * dt
        m12 = -(pb * bz + pt * sz + gz) * dt
        m21 = -(pt * by * dt + pb * sy)
        m22 = 1.0 - (pt * bz * dt + pb * sz)
        p[sl], K1[sl] = _solve2(m11, m12, m21, m22, pb * (1.0 + bx * dt) + pt * sx * dt + gx * dt,
                                pt * (1.0 + bx * dt) + pb * sx)
        pbar[sl], ptil[sl] = pb, pt
    pk = p[:S]
    margin = np.abs(1.0 - pk * jet.sigma_z)
    if np.min(margin) < 0.5 * beta0:
        k = int(np.argmin(margin))
        raise SingularityError(f"|1 - p sigma_z| = {margin[k]:.3g} < beta0/2 at flat node {k}")
    K1f = (jet.sigma_x * pk + jet.sigma_y * pk ** 2 + ptil) / (1.0 - pk * jet.sigma_z)
    if np.isfinite(bound) and np.max(np.abs(p)) > bound + 1e-8:
        warnings.warn(f"|p| reaches {np.max(np.abs(p)):.6g}, above the comparison bound {bound:.6g}")
    return AdjointBundle(TreeProcess(tree, p), TreeProcess(tree, ptil, N - 1), TreeProcess(tree, K1, N - 1),
                         pbar, K1f, bound, float(np.max(np.abs(ptil))), float(np.min(margin)), jet, st)


def _quad(jet: Jet, name: str, sl: slice, e0, e1, e2):
    """[e0, e1, e2] D^2 psi [e0, e1, e2]^T for psi = ``name``."""
    g = lambda pq: jet.get(f"{name}_{pq}")[sl]  # noqa: E731
    return (g("xx") * e0 * e0 + g("yy") * e1 * e1 + g("zz") * e2 * e2
            + 2.0 * (g("xy") * e0 * e1 + g("xz") * e0 * e2 + g("yz") * e1 * e2))


def solve_second_order_adjoint(coeffs: CoefficientModel, optimal: FbsdeSolution,
                               first: AdjointBundle) -> SecondOrderBundle:
    """Backward induction of the linear BSDE for P with P(T) = phi_xx(X(T)); Q := difference quotient."""
    tree = optimal.tree
    N, dt, r = tree.N, tree.grid.dt, tree.grid.sqrt_dt
    S = inner_size(tree)
    jet = first.jet
    P = np.empty(tree.size)
    K2 = np.empty(S)
    Q = np.empty(S)
    P[S:] = coeffs.phi(tree.nodes(N), 2)
    for k in range(N - 1, -1, -1):
        sl, nx = step_slice(k), step_slice(k + 1)
        Pb, Pt = _children(P[nx], first.stencils, sl, r)
        pb, pt = first.p_bar[sl], first.q.flat[sl]
        pk, K1 = first.p.flat[sl], first.K1.flat[sl]
        by, bz, sy, sz, gy, gz = (jet.get(n)[sl] for n in ("b_y", "b_z", "sigma_y", "sigma_z", "g_y", "g_z"))
        a1 = jet.b_x[sl] + by * pk + bz * K1
        s1 = jet.sigma_x[sl] + sy * pk + sz * K1
        vb, vs, vg = (_quad(jet, n, sl, 1.0, pk, K1) for n in ("b", "sigma", "g"))
        grow = (1.0 + a1 * dt) ** 2 + s1 * s1 * dt
        m11 = 1.0 - (pb * by + pt * sy + gy) * dt
        m12 = -(pb * bz + pt * sz + gz) * dt
        m21 = -(pt * by * dt + pb * sy)
        m22 = 1.0 - (pt * bz * dt + pb * sz)
        r1 = Pb * grow + 2.0 * Pt * (1.0 + a1 * dt) * s1 * dt + (pb * vb + pt * vs + vg) * dt
        r2 = Pt * grow + 2.0 * Pb * (1.0 + a1 * dt) * s1 + pt * vb * dt + pb * vs
        P[sl], K2[sl] = _solve2(m11, m12, m21, m22, r1, r2)
        Q[sl] = Pt
    return SecondOrderBundle(TreeProcess(tree, P), TreeProcess(tree, Q, N - 1), TreeProcess(tree, K2, N - 1))


@dataclass
class SpikeIncrements:
    """delta psi(Delta) = psi(z_bar + Delta, u) - psi(z_bar, u_bar) on steps 0..N-1 (zero off the spike)."""

    indicator: np.ndarray  # per flat node
    delta: np.ndarray
    db: np.ndarray
    dsigma: np.ndarray
    dg: np.ndarray
    dsigma_x: np.ndarray
    dsigma_y: np.ndarray
    dsigma_z: np.ndarray


def spike_increments(coeffs: CoefficientModel, optimal: FbsdeSolution, spike: SpikeSpec,
                     delta: np.ndarray) -> SpikeIncrements:
    tree = optimal.tree
    N = tree.N
    S = inner_size(tree)
    ind = np.zeros(S)
    for k in spike.steps(tree.grid):
        ind[step_slice(k)] = 1.0
    t = node_times(tree, N - 1)
    x = node_coordinates(tree, N - 1)
    y, z, ub = optimal.Y.flat[:S], optimal.Z.flat, optimal.u
    u = np.where(ind > 0, spike.u, ub)
    zs = z + np.where(ind > 0, delta, 0.0)
    base = coeffs.jet(t, x, y, z, ub, order=1)
    pert = coeffs.jet(t, x, y, zs, u, order=1)

    def d(name):
        return np.where(ind > 0, pert.get(name) - base.get(name), 0.0)

    return SpikeIncrements(ind, np.where(ind > 0, delta, 0.0), d("b"), d("sigma"), d("g"),
                           d("sigma_x"), d("sigma_y"), d("sigma_z"))


def solve_auxiliary_yhat(coeffs: CoefficientModel, optimal: FbsdeSolution, first: AdjointBundle,
                         second: SecondOrderBundle, spike: SpikeSpec, delta: np.ndarray
                         ) -> tuple[TreeProcess, TreeProcess, float]:
    """Linear BSDE for Y_hat driven by [delta H + P delta sigma^2 / 2] on the spike set.

    ``delta`` is the flat Delta field (steps 0..N-1) solved with the child
    average of p.  Returns (Y_hat, Z_hat, Y_hat(0)); Z_hat is the lattice
    z-component of the linear system.
    """
    tree = optimal.tree
    N, dt, r = tree.N, tree.grid.dt, tree.grid.sqrt_dt
    S = inner_size(tree)
    jet = first.jet
    inc = spike_increments(coeffs, optimal, spike, delta)
    Yh = np.empty(tree.size)
    Zh = np.empty(S)
    Yh[S:] = 0.0
    for k in range(N - 1, -1, -1):
        sl, nx = step_slice(k), step_slice(k + 1)
        Yb, Yt = _children(Yh[nx], first.stencils, sl, r)
        pb, pt = first.p_bar[sl], first.q.flat[sl]
        Pb, Pt = _children(second.P.flat[nx], first.stencils, sl, r)
        by, bz, sy, sz, gy, gz = (jet.get(n)[sl] for n in ("b_y", "b_z", "sigma_y", "sigma_z", "g_y", "g_z"))
        db, ds, dg = inc.db[sl], inc.dsigma[sl], inc.dg[sl]
        m11 = 1.0 - (pb * by + pt * sy + gy) * dt
        m12 = -(pb * bz + pt * sz + gz) * dt
        m21 = -(pt * by * dt + pb * sy)
        m22 = 1.0 - (pt * bz * dt + pb * sz)
        r1 = Yb + (pb * db + 0.5 * Pb * ds * ds + pt * ds + dg) * dt
        r2 = Yt + pt * db * dt + 0.5 * Pt * ds * ds * dt
        Yh[sl], Zh[sl] = _solve2(m11, m12, m21, m22, r1, r2)
    return TreeProcess(tree, Yh), TreeProcess(tree, Zh, N - 1), float(Yh[0])


def hamiltonian_coefficients(first: AdjointBundle) -> tuple[np.ndarray, np.ndarray]:
    """Drift and volatility factors of the weight process gamma (node values).

    With H = g + p b + q sigma these are H_y + H_z p sigma_y / (1 - p sigma_z)
    and H_z / (1 - p sigma_z).
    """
    jet = first.jet
    S = jet.b.size
    p, q = first.p.flat[:S], first.q.flat
    Hy = jet.g_y + p * jet.b_y + q * jet.sigma_y
    Hz = jet.g_z + p * jet.b_z + q * jet.sigma_z
    den = 1.0 - p * jet.sigma_z
    return Hy + Hz * p * jet.sigma_y / den, Hz / den


def gamma_representation(coeffs: CoefficientModel, optimal: FbsdeSolution, first: AdjointBundle,
                         second: SecondOrderBundle, spike: SpikeSpec, delta: np.ndarray) -> float:
    """E int gamma [delta H + P delta sigma^2 / 2] I dt by forward propagation of the gamma-weighted law.

    The weighted law of X at step k is a signed measure on the step-k nodes; it
    moves forward with the transposed interpolation weights of the children,
    each child carrying (1 + A dt +/- B sqrt(dt)) / 2.  ``delta`` is the Delta
    field solved with the node values of p.
    """
    tree = optimal.tree
    N, dt, r = tree.N, tree.grid.dt, tree.grid.sqrt_dt
    A, B = hamiltonian_coefficients(first)
    inc = spike_increments(coeffs, optimal, spike, delta)
    S = inner_size(tree)
    p, q, P = first.p.flat[:S], first.q.flat, second.P.flat[:S]
    bracket = (p * inc.db + q * inc.dsigma + inc.dg + 0.5 * P * inc.dsigma ** 2) * inc.indicator
    sp_, wp, sm, wm = first.stencils
    m = np.array([1.0])
    total = 0.0
    for k in range(N):
        sl = step_slice(k)
        total += dt * float(np.dot(m, bracket[sl]))
        nxt = np.zeros(k + 2)
        up = 0.5 * m * (1.0 + A[sl] * dt + B[sl] * r)
        dn = 0.5 * m * (1.0 + A[sl] * dt - B[sl] * r)
        top = min(4, k + 2)
        for c in range(top):
            np.add.at(nxt, sp_[sl] + c, up * wp[sl, c])
            np.add.at(nxt, sm[sl] + c, dn * wm[sl, c])
        m = nxt
    return total


def check_inputs(optimal: FbsdeSolution) -> None:
    if optimal.xp is None:
        raise InvalidArgument("the optimal solution must carry child positions")
