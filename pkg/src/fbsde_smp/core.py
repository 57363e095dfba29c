"""Time grid, recombining tree, tree-valued processes and the coefficient data model.

The tree is a recombining binomial lattice.  Node ``(k, j)`` sits at

    x0 + (2j - k) * scale * sqrt(dt),     j = 0..k,

so with ``x0 = 0`` and ``scale = 1`` it is the usual Brownian tree.  The
forward state of a fully coupled system is carried on such a lattice: every
solver works with functions of ``(t_k, x)`` on the nodes (decoupling fields),
and the one-step transition from a node moves to ``x + b dt +/- sigma sqrt(dt)``
with probability 1/2 each.  Off-node children are evaluated by local cubic
interpolation of the step ``k+1`` node values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import sympy as sp

from . import kernels

SYMBOLS = sp.symbols("t x y z u")
STATE_VARS = ("x", "y", "z")
FIRST_VARS = ("x", "y", "z", "u")
SECOND_PAIRS = ("xx", "xy", "yy", "xz", "yz", "zz")
COEFF_NAMES = ("b", "sigma", "g")


class InvalidArgument(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class NumericDivergence(RuntimeError):
    """Raised when an iterative numerical scheme fails to converge."""


class SingularityError(RuntimeError):
    """Raised when a factor such as 1 - p*sigma_z gets too close to zero."""


# ---------------------------------------------------------------------------
# Grid and tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self) -> None:
        if not (self.T > 0) or not math.isfinite(self.T):
            raise InvalidArgument(f"horizon T must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidArgument(f"step count N must be a positive integer, got {self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.dt)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def t(self, k: int) -> float:
        return k * self.dt


def _offset(k: int) -> int:
    return k * (k + 1) // 2


@dataclass(frozen=True)
class BrownianTree:
    """Recombining binomial lattice with k+1 nodes at step k."""

    grid: TimeGrid
    x0: float = 0.0
    scale: float = 1.0

    def __post_init__(self) -> None:
        if not (self.scale > 0):
            raise InvalidArgument("lattice scale must be positive")

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def spacing(self) -> float:
        return 2.0 * self.scale * self.grid.sqrt_dt

    @property
    def size(self) -> int:
        return _offset(self.N + 1)

    def n_nodes(self, k: int) -> int:
        return k + 1

    def offset(self, k: int) -> int:
        return _offset(k)

    def lowest(self, k: int) -> float:
        return self.x0 - k * self.scale * self.grid.sqrt_dt

    def node(self, k: int, j: int) -> float:
        if not 0 <= j <= k <= self.N:
            raise InvalidArgument(f"no node ({k}, {j})")
        return self.x0 + (2 * j - k) * self.scale * self.grid.sqrt_dt

    def nodes(self, k: int) -> np.ndarray:
        return self.x0 + (2.0 * np.arange(k + 1) - k) * self.scale * self.grid.sqrt_dt

    def brownian(self, k: int) -> np.ndarray:
        """Driving Brownian value (2j - k) sqrt(dt) at the step-k nodes."""
        return (2.0 * np.arange(k + 1) - k) * self.grid.sqrt_dt

    def interpolate(self, values: np.ndarray, k: int, xq: np.ndarray) -> np.ndarray:
        """Evaluate the step-k node function ``values`` at arbitrary points."""
        vals = np.ascontiguousarray(values, dtype=float)
        if vals.shape[-1] != k + 1:
            raise InvalidArgument("values do not match the node count of the step")
        return kernels.interp_many(np.atleast_2d(vals), self.lowest(k), self.spacing,
                                   np.ascontiguousarray(xq, dtype=float)).reshape(
            vals.shape[:-1] + np.shape(xq))

    def child_stencils(self, k: int, xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stencil start index and four weights for points ``xq`` on step k+1."""
        return kernels.cubic_stencil(np.ascontiguousarray(xq, dtype=float),
                                     self.lowest(k + 1), self.spacing, k + 2)


def build_tree(T: float, N: int, x0: float = 0.0, scale: float = 1.0) -> BrownianTree:
    return BrownianTree(TimeGrid(float(T), int(N)), float(x0), float(scale))


class TreeProcess:
    """A real value on every node of a tree, stored step by step in one flat array."""

    __slots__ = ("tree", "flat", "last")

    def __init__(self, tree: BrownianTree, flat: np.ndarray | None = None, last: int | None = None):
        self.tree = tree
        self.last = tree.N if last is None else last
        size = _offset(self.last + 1)
        if flat is None:
            flat = np.zeros(size)
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (size,):
            raise InvalidArgument(f"flat storage must have {size} entries, got {flat.shape}")
        self.flat = flat

    @classmethod
    def from_steps(cls, tree: BrownianTree, steps: Sequence[np.ndarray]) -> "TreeProcess":
        for k, v in enumerate(steps):
            if np.shape(v) != (k + 1,):
                raise InvalidArgument(f"step {k} has shape {np.shape(v)}, expected ({k + 1},)")
        return cls(tree, np.concatenate([np.asarray(v, float) for v in steps]), len(steps) - 1)

    @classmethod
    def constant(cls, tree: BrownianTree, value: float) -> "TreeProcess":
        return cls(tree, np.full(tree.size, float(value)))

    def step(self, k: int) -> np.ndarray:
        if not 0 <= k <= self.last:
            raise InvalidArgument(f"step {k} outside 0..{self.last}")
        return self.flat[_offset(k):_offset(k + 1)]

    def __getitem__(self, kj: tuple[int, int]) -> float:
        k, j = kj
        return float(self.step(k)[j])

    def steps(self) -> list[np.ndarray]:
        return [self.step(k) for k in range(self.last + 1)]

    def sup(self) -> float:
        return float(np.max(np.abs(self.flat))) if self.flat.size else 0.0

    def copy(self) -> "TreeProcess":
        return TreeProcess(self.tree, self.flat.copy(), self.last)


def _children(values_next: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    values_next = np.asarray(values_next, dtype=float)
    if values_next.shape != (k + 2,):
        raise InvalidArgument(f"step {k + 1} must hold {k + 2} values, got {values_next.shape}")
    return values_next[1:], values_next[:-1]


def conditional_expectation(proc: TreeProcess | np.ndarray, k: int) -> np.ndarray:
    """E[. | F_k] on the Brownian tree: the average of the two children."""
    nxt = proc.step(k + 1) if isinstance(proc, TreeProcess) else proc
    up, down = _children(nxt, k)
    return 0.5 * (up + down)


def martingale_coefficient(proc: TreeProcess | np.ndarray, k: int, sqrt_dt: float | None = None) -> np.ndarray:
    """Difference quotient (up - down) / (2 sqrt(dt)) on the Brownian tree."""
    if isinstance(proc, TreeProcess):
        nxt, r = proc.step(k + 1), proc.tree.grid.sqrt_dt
    else:
        if sqrt_dt is None:
            raise InvalidArgument("sqrt_dt is required for raw arrays")
        nxt, r = proc, sqrt_dt
    up, down = _children(nxt, k)
    return (up - down) / (2.0 * r)


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lipschitz:
    L: float = 1.0
    L1: float = 0.0
    L2: float = 0.0
    L3: float = 0.0


class Jet:
    """Values and derivatives of b, sigma, g at a batch of points."""

    def __init__(self, data: dict[str, np.ndarray]):
        self.__dict__.update(data)

    def get(self, name: str) -> np.ndarray:
        return self.__dict__[name]


def _jet_names(order: int) -> list[str]:
    names = []
    for c in COEFF_NAMES:
        names.append(c)
        names += [f"{c}_{v}" for v in FIRST_VARS]
        if order >= 2:
            names += [f"{c}_{pq}" for pq in SECOND_PAIRS]
    return names


def _broadcast(values: Iterable, shape: tuple[int, ...]) -> list[np.ndarray]:
    return [np.broadcast_to(np.asarray(v, dtype=float), shape) for v in values]


class CoefficientModel:
    """Coefficients b, sigma, g (functions of t, x, y, z, u) and phi (function of x).

    Built from sympy expressions so that every first and second derivative is
    exact.  ``tags`` may contain ``"sigma-z-free"`` or ``"sigma-linear-z"``.
    """

    def __init__(self, exprs: Mapping[str, sp.Expr], lipschitz: Lipschitz,
                 tags: Sequence[str] = (), source: Mapping[str, str] | None = None):
        t, x, y, z, u = SYMBOLS
        self.exprs = {k: sp.sympify(v) for k, v in exprs.items()}
        missing = {"b", "sigma", "g", "phi"} - set(self.exprs)
        if missing:
            raise InvalidArgument(f"missing coefficient expressions: {sorted(missing)}")
        if self.exprs["phi"].free_symbols - {x}:
            raise InvalidArgument("phi may depend on x only")
        self.lipschitz = lipschitz
        self.tags = tuple(sorted(set(tags)))
        self.source = dict(source or {})
        syms = {"x": x, "y": y, "z": z, "u": u}
        table: dict[str, sp.Expr] = {}
        for c in COEFF_NAMES:
            e = self.exprs[c]
            table[c] = e
            for v in FIRST_VARS:
                table[f"{c}_{v}"] = sp.diff(e, syms[v])
            for pq in SECOND_PAIRS:
                table[f"{c}_{pq}"] = sp.diff(e, syms[pq[0]], syms[pq[1]])
        self.table = table
        self._jet_fns: dict[int, tuple[list[str], Callable]] = {}
        for order in (0, 1, 2):
            names = list(COEFF_NAMES) if order == 0 else _jet_names(order)
            fn = sp.lambdify(SYMBOLS, [table[n] for n in names], modules="numpy", cse=True)
            self._jet_fns[order] = (names, fn)
        self._single = {n: sp.lambdify(SYMBOLS, e, modules="numpy") for n, e in table.items()}
        phi = self.exprs["phi"]
        self._phi = [sp.lambdify(x, e, modules="numpy") for e in (phi, sp.diff(phi, x), sp.diff(phi, x, 2))]
        self._check_tags()

    @classmethod
    def from_strings(cls, spec: Mapping[str, str], lipschitz: Lipschitz, tags: Sequence[str] = (),
                     params: Mapping[str, float] | None = None) -> "CoefficientModel":
        t, x, y, z, u = SYMBOLS
        local = {"t": t, "x": x, "y": y, "z": z, "u": u}
        subs = {sp.Symbol(k): v for k, v in (params or {}).items()}
        exprs = {}
        for key in ("b", "sigma", "g", "phi"):
            if key not in spec:
                raise InvalidArgument(f"coefficient spec lacks '{key}'")
            e = sp.sympify(spec[key], locals=local).subs(subs)
            free = {s.name for s in e.free_symbols} - set(local)
            if free:
                raise InvalidArgument(f"unbound symbols in '{key}': {sorted(free)}")
            exprs[key] = e
        return cls(exprs, lipschitz, tags, source={k: str(spec[k]) for k in ("b", "sigma", "g", "phi")})

    def _check_tags(self) -> None:
        if "sigma-z-free" in self.tags and self.table["sigma_z"] != 0:
            raise InvalidArgument("tag sigma-z-free set but sigma depends on z")
        if "sigma-linear-z" in self.tags:
            if self.table["sigma_zz"] != 0 or self.table["sigma_z"].free_symbols - {SYMBOLS[0]}:
                raise InvalidArgument("tag sigma-linear-z needs sigma = A(t) z + sigma1(t, x, y, u)")

    @property
    def linear_in_z(self) -> bool:
        return "sigma-linear-z" in self.tags

    # evaluation ---------------------------------------------------------
    def jet(self, t, x, y, z, u, order: int = 1) -> Jet:
        names, fn = self._jet_fns[order]
        shape = np.broadcast_shapes(*(np.shape(a) for a in (t, x, y, z, u)))
        return Jet(dict(zip(names, _broadcast(fn(t, x, y, z, u), shape))))

    def __call__(self, name: str, t, x, y, z, u) -> np.ndarray:
        shape = np.broadcast_shapes(*(np.shape(a) for a in (t, x, y, z, u)))
        return np.broadcast_to(np.asarray(self._single[name](t, x, y, z, u), dtype=float), shape)

    def b(self, t, x, y, z, u):
        return self("b", t, x, y, z, u)

    def sigma(self, t, x, y, z, u):
        return self("sigma", t, x, y, z, u)

    def g(self, t, x, y, z, u):
        return self("g", t, x, y, z, u)

    def phi(self, x, order: int = 0) -> np.ndarray:
        return np.broadcast_to(np.asarray(self._phi[order](x), dtype=float), np.shape(x))

    def depends_on(self, name: str, var: str) -> bool:
        return self.table[f"{name}_{var}"] != 0

    @property
    def decoupled(self) -> bool:
        return not any(self.depends_on(c, v) for c in ("b", "sigma") for v in ("y", "z"))

    def describe(self) -> dict[str, str]:
        return {k: str(self.exprs[k]) for k in ("b", "sigma", "g", "phi")}


def derivative_self_check(model: CoefficientModel, points: np.ndarray | None = None,
                          step: float = 1e-6, rtol: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Compare every analytic derivative with a central finite difference.

    Returns the worst relative error per derivative; raises if any exceeds ``rtol``.
    The relative error uses max(1, |value|) as the scale.
    """
    if points is None:
        rng = np.random.default_rng(seed)
        points = rng.uniform(-1.5, 1.5, size=(64, 5))
        points[:, 0] = np.abs(points[:, 0])
    cols = [points[:, i] for i in range(5)]
    index = {"x": 1, "y": 2, "z": 3, "u": 4}
    worst: dict[str, float] = {}

    def shifted(var: str, h: float) -> list[np.ndarray]:
        c = [a.copy() for a in cols]
        c[index[var]] = c[index[var]] + h
        return c

    for c in COEFF_NAMES:
        for v in FIRST_VARS:
            exact = model(f"{c}_{v}", *cols)
            fd = (model(c, *shifted(v, step)) - model(c, *shifted(v, -step))) / (2 * step)
            worst[f"{c}_{v}"] = float(np.max(np.abs(exact - fd) / np.maximum(1.0, np.abs(exact))))
        for pq in SECOND_PAIRS:
            a, b2 = pq
            exact = model(f"{c}_{pq}", *cols)
            fd = (model(f"{c}_{a}", *shifted(b2, step)) - model(f"{c}_{a}", *shifted(b2, -step))) / (2 * step)
            worst[f"{c}_{pq}"] = float(np.max(np.abs(exact - fd) / np.maximum(1.0, np.abs(exact))))
    xs = cols[1]
    for order, name in ((1, "phi_x"), (2, "phi_xx")):
        exact = model.phi(xs, order)
        fd = (model.phi(xs + step, order - 1) - model.phi(xs - step, order - 1)) / (2 * step)
        worst[name] = float(np.max(np.abs(exact - fd) / np.maximum(1.0, np.abs(exact))))
    bad = {k: v for k, v in worst.items() if v > rtol}
    if bad:
        raise InvalidArgument(f"derivative self-check failed: {bad}")
    return worst


def lipschitz_spot_check(model: CoefficientModel, n: int = 2000, radius: float = 5.0,
                         u_values: Sequence[float] = (0.0,), T: float = 1.0, seed: int = 0) -> dict[str, float]:
    """Sample |psi_x|, |psi_y|, ... and report the largest value against the declared bounds."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, T, n)
    x, y, z = (rng.uniform(-radius, radius, n) for _ in range(3))
    u = rng.choice(np.asarray(u_values, dtype=float), n)
    jet = model.jet(t, x, y, z, u, order=1)
    obs = {
        "L1": max(float(np.max(np.abs(jet.get(n_)))) for n_ in ("b_x", "sigma_x", "g_x", "g_y", "g_z")),
        "L2": max(float(np.max(np.abs(jet.get(n_)))) for n_ in ("b_y", "b_z", "sigma_y")),
        "L3": float(np.max(np.abs(jet.sigma_z))),
    }
    obs["L1"] = max(obs["L1"], float(np.max(np.abs(model.phi(x, 1)))))
    lip = model.lipschitz
    obs["ok"] = float(obs["L1"] <= lip.L1 + 1e-12 and obs["L2"] <= lip.L2 + 1e-12 and obs["L3"] <= lip.L3 + 1e-12)
    return obs


# ---------------------------------------------------------------------------
# Controls
# ---------------------------------------------------------------------------


class Control:
    """A deterministic control u(t_k), optionally in feedback form u(t_k, x)."""

    def __init__(self, steps: np.ndarray | None = None,
                 feedback: Callable[[float, np.ndarray], np.ndarray] | None = None, N: int | None = None):
        if (steps is None) == (feedback is None):
            raise InvalidArgument("give exactly one of step values or a feedback function")
        self.steps_ = None if steps is None else np.asarray(steps, dtype=float)
        self.feedback = feedback
        self.N = len(self.steps_) if steps is not None else N

    @classmethod
    def constant(cls, value: float, N: int) -> "Control":
        return cls(np.full(N, float(value)))

    def at(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        if self.steps_ is not None:
            return np.full(np.shape(x), self.steps_[k])
        return np.broadcast_to(np.asarray(self.feedback(t, x), dtype=float), np.shape(x))

    @property
    def deterministic(self) -> bool:
        return self.steps_ is not None

    def values(self) -> np.ndarray:
        if self.steps_ is None:
            raise InvalidArgument("feedback controls have no step table")
        return self.steps_


@dataclass(frozen=True)
class ControlSpec:
    """Control domain (finite set or interval with a grid) and the candidate control."""

    kind: str
    values: tuple[float, ...] = ()
    lo: float = 0.0
    hi: float = 0.0
    resolution: int = 101
    candidate: float | tuple[float, ...] = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("finite", "interval"):
            raise InvalidArgument(f"unknown control domain kind '{self.kind}'")
        if self.kind == "finite" and not self.values:
            raise InvalidArgument("finite control domain needs at least one value")
        if self.kind == "interval" and not (self.lo <= self.hi):
            raise InvalidArgument("interval control domain needs lo <= hi")
        if self.resolution < 2 and self.kind == "interval":
            raise InvalidArgument("interval grid needs at least two points")
        cand = np.atleast_1d(np.asarray(self.candidate, dtype=float))
        if not np.all([self.contains(c) for c in cand]):
            raise InvalidArgument("candidate control leaves the control domain")

    def grid(self) -> np.ndarray:
        if self.kind == "finite":
            return np.array(sorted(set(self.values)), dtype=float)
        return np.linspace(self.lo, self.hi, self.resolution)

    def contains(self, v: float, tol: float = 1e-12) -> bool:
        if self.kind == "finite":
            return any(abs(v - w) <= tol for w in self.values)
        return self.lo - tol <= v <= self.hi + tol

    @property
    def convex(self) -> bool:
        return self.kind == "interval"

    def candidate_control(self, N: int) -> Control:
        cand = np.atleast_1d(np.asarray(self.candidate, dtype=float))
        if cand.size == 1:
            return Control.constant(float(cand[0]), N)
        if cand.size != N:
            raise InvalidArgument(f"candidate control has {cand.size} steps, grid has {N}")
        return Control(cand)


@dataclass(frozen=True)
class SpikeSpec:
    t0: float
    eps: float
    u: float

    def __post_init__(self) -> None:
        if not (self.eps > 0):
            raise InvalidArgument("spike duration must be positive")
        if self.t0 < 0:
            raise InvalidArgument("spike must start inside the horizon")

    def steps(self, grid: TimeGrid) -> range:
        """Grid steps covered by the snapped set [t0, t0 + eps)."""
        if self.t0 + self.eps > grid.T * (1 + 1e-12):
            raise InvalidArgument("spike leaves the horizon")
        k0 = int(round(self.t0 / grid.dt))
        k1 = int(round((self.t0 + self.eps) / grid.dt))
        k0 = min(k0, grid.N - 1)
        k1 = min(max(k1, k0 + 1), grid.N)
        return range(k0, k1)

    def indicator(self, grid: TimeGrid) -> np.ndarray:
        ind = np.zeros(grid.N)
        ind[list(self.steps(grid))] = 1.0
        return ind

    def measure(self, grid: TimeGrid) -> float:
        return len(self.steps(grid)) * grid.dt
