"""Pure numpy versions of the lattice kernels (fallback when the extension is absent)."""

from __future__ import annotations

import numpy as np


def cubic_stencil(xq: np.ndarray, x_lo: float, h: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Start index and Lagrange weights of the local interpolant on a uniform grid.

    Uses four nodes when the grid has them, otherwise all ``n`` nodes (weights
    padded with zeros).  Points outside the grid are extrapolated from the end
    stencil.
    """
    xq = np.asarray(xq, dtype=float)
    pos = (xq - x_lo) / h
    w = np.zeros(xq.shape + (4,))
    if n >= 4:
        start = np.clip(np.floor(pos).astype(np.int64) - 1, 0, n - 4)
        s = pos - start
        w[..., 0] = -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0
        w[..., 1] = s * (s - 2.0) * (s - 3.0) / 2.0
        w[..., 2] = -s * (s - 1.0) * (s - 3.0) / 2.0
        w[..., 3] = s * (s - 1.0) * (s - 2.0) / 6.0
        return start, w
    start = np.zeros(xq.shape, dtype=np.int64)
    s = pos
    if n == 1:
        w[..., 0] = 1.0
    elif n == 2:
        w[..., 0] = 1.0 - s
        w[..., 1] = s
    else:
        w[..., 0] = (s - 1.0) * (s - 2.0) / 2.0
        w[..., 1] = -s * (s - 2.0)
        w[..., 2] = s * (s - 1.0) / 2.0
    return start, w


def gather(values: np.ndarray, start: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply stencils to a node array of one step; ``values`` may be (n,) or (F, n)."""
    n = values.shape[-1]
    out = 0.0
    for m in range(min(4, n)):
        out = out + w[..., m] * values[..., np.minimum(start + m, n - 1)]
    return np.asarray(out, dtype=float)


def interp_many(values: np.ndarray, x_lo: float, h: float, xq: np.ndarray) -> np.ndarray:
    """Interpolate F node functions (rows of ``values``) at the points ``xq``."""
    values = np.atleast_2d(values)
    start, w = cubic_stencil(xq, x_lo, h, values.shape[1])
    return gather(values, start, w)


def poly_backward(N: int, dt: float, start_p: np.ndarray, w_p: np.ndarray, start_m: np.ndarray,
                  w_m: np.ndarray, coef: np.ndarray, forcing: np.ndarray, lam_p: np.ndarray,
                  lam_m: np.ndarray, mu_p: np.ndarray, mu_m: np.ndarray,
                  terminal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward sweep of a linear FBSDE with polynomial forcing on a lattice.

    The unknown decoupling field at step k is eta = a xi + c0 + c1 chi + c2 chi^2
    (and zeta likewise), where chi is an auxiliary linear state with one-step
    update chi -> lam chi + mu along the up (p) and down (m) branches.  ``coef``
    holds alpha1, beta1, gamma1, alpha2, ..., gamma3 per node; ``forcing`` holds
    the three polynomial coefficients of each of f1, f2, f3.  Each node solves
    the same 2x2 linear system for the four degrees.
    """
    r = np.sqrt(dt)
    total = (N + 1) * (N + 2) // 2
    inner = N * (N + 1) // 2
    eta = np.zeros((4, total))
    zeta = np.zeros((4, inner))
    eta[:, inner:] = terminal
    for k in range(N - 1, -1, -1):
        lo, hi = k * (k + 1) // 2, (k + 1) * (k + 2) // 2
        nxt = eta[:, hi:hi + k + 2]
        vp = gather(nxt, start_p[lo:hi], w_p[lo:hi])
        vm = gather(nxt, start_m[lo:hi], w_m[lo:hi])
        a1, b1, g1, a2, b2, g2, a3, b3, g3 = coef[:, lo:hi]
        f = forcing[:, lo:hi]
        lp, lm, mp, mm = lam_p[lo:hi], lam_m[lo:hi], mu_p[lo:hi], mu_m[lo:hi]
        A = 0.5 * (vp[0] + vm[0])
        At = (vp[0] - vm[0]) / (2.0 * r)
        m11 = 1.0 - (A * b1 + At * b2 + b3) * dt
        m12 = -(A * g1 + At * g2 + g3) * dt
        m21 = -(At * b1 * dt + A * b2)
        m22 = 1.0 - (At * g1 * dt + A * g2)
        det = m11 * m22 - m12 * m21

        def solve(re, rz):
            return (re * m22 - m12 * rz) / det, (m11 * rz - m21 * re) / det

        eta[0, lo:hi], zeta[0, lo:hi] = solve(A * (1.0 + a1 * dt) + At * a2 * dt + a3 * dt,
                                              At * (1.0 + a1 * dt) + A * a2)
        c0p, c1p, c2p = vp[1], vp[2], vp[3]
        c0m, c1m, c2m = vm[1], vm[2], vm[3]
        plus = (c0p + c1p * mp + c2p * mp * mp, c1p * lp + 2.0 * c2p * lp * mp, c2p * lp * lp)
        minus = (c0m + c1m * mm + c2m * mm * mm, c1m * lm + 2.0 * c2m * lm * mm, c2m * lm * lm)
        for d in range(3):
            E = 0.5 * (plus[d] + minus[d])
            D = (plus[d] - minus[d]) / (2.0 * r)
            f1, f2, f3 = f[d], f[3 + d], f[6 + d]
            eta[1 + d, lo:hi], zeta[1 + d, lo:hi] = solve(A * f1 * dt + At * f2 * dt + f3 * dt + E,
                                                          At * f1 * dt + A * f2 + D)
    return eta, zeta
