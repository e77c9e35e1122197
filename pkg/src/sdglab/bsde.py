"""Backward solvers for the recursive payoff equation.

One implicit one-step scheme is shared by every backend:

    Z_k = E_k[ Y_{k+1} dW_k ] / dt            (componentwise)
    Y_k = E_k[ Y_{k+1} ] + f(t_k, X_k, Y_k, Z_k, theta_k, gamma_k) dt,

with the Y-equation solved per node by fixed-point iteration (a contraction
whenever dt * Lipschitz(f) < 1).  On trees and recombining lattices E_k is an
exact child-weighted sum, so those solves carry no statistical error; the
Monte Carlo backend replaces E_k by least-squares projection on a polynomial
basis of the state (plus the finite noise history, when present).

The backward semigroup maps a payoff given at a later slice to the solution
value at an earlier one; solving with the terminal payoff and composing the
semigroup over an intermediate slice agree by construction, which is the
discrete form of the semigroup identity used throughout the game layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grids import NoiseLattice, TimeGrid
from .hamiltonian import TestField, field_shifted_driver, driver_lipschitz_modulus
from .problems import ProblemSpec
from .sde import Control, ControlledTree, StateTrajectory, lattice_forward

__all__ = [
    "BsdeSolution",
    "SemigroupQuery",
    "NumericsError",
    "tree_backward",
    "solve_lattice",
    "recombining_backward",
    "solve_lsmc",
    "semigroup_apply",
    "payoff_value",
    "compare_bsde",
    "freezing_gap",
    "check_step_contraction",
]


class NumericsError(RuntimeError):
    """Raised on scheme preconditions or convergence failures."""


MAX_FP_ITER = 50
FP_TOL = 1e-13


def check_step_contraction(dt: float, L: float, where: str = "solver") -> None:
    if dt * L >= 1.0:
        needed = int(math.floor(L)) + 1  # steps per unit time
        raise NumericsError(
            f"{where}: dt*L = {dt * L:.3f} >= 1 breaks the fixed-point "
            f"contraction; use at least {needed} steps per unit of time")


def implicit_step(e: np.ndarray, z: np.ndarray, f_of_y: Callable, dt: float,
                  max_iter: int = MAX_FP_ITER, tol: float = FP_TOL) -> np.ndarray:
    """Solve y = e + dt * f(y) per node by fixed-point iteration."""
    y = e.copy()
    scale = max(1.0, float(np.max(np.abs(e))) if e.size else 1.0)
    for _ in range(max_iter):
        y_new = e + dt * np.asarray(f_of_y(y))
        if np.max(np.abs(y_new - y)) <= tol * scale:
            return y_new
        y = y_new
    resid = float(np.max(np.abs(y - e - dt * np.asarray(f_of_y(y)))))
    raise NumericsError(
        f"implicit step failed to converge in {max_iter} iterations "
        f"(residual {resid:.2e}); reduce dt * Lipschitz constant")


@dataclass
class BsdeSolution:
    """Solution fields of one backward solve.

    ``Y[k]``/``Z[k]`` are per-node (tree) or per-path (Monte Carlo) arrays at
    relative slice k; the terminal slice holds the supplied payoff exactly.
    """

    scheme: str  # "lattice-exact" | "lsmc"
    Y: list = field(repr=False)
    Z: list = field(repr=False)
    start_index: int = 0
    residual_max: float = 0.0
    value: float = math.nan  # Y at the root / start-slice average
    value_se: float | None = None  # bootstrap standard error (lsmc)
    basis_degree: int | None = None
    ridge_fallback: bool = False
    regression_residuals: list | None = None
    apriori_bound: float | None = None

    def root(self) -> float:
        return float(np.mean(self.Y[0]))


@dataclass(frozen=True)
class SemigroupQuery:
    """One application of the backward semigroup between two grid slices."""

    start: int  # relative slice s
    end: int  # relative slice where the payoff eta is given
    eta: np.ndarray
    solver: str = "lattice-exact"

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError("need 0 <= start <= end")


# ---------------------------------------------------------------------------
# Exact tree backward
# ---------------------------------------------------------------------------

def tree_backward(tree: ControlledTree, terminal: np.ndarray, driver=None,
                  stop: int = 0, end: int | None = None,
                  max_iter: int = MAX_FP_ITER, tol: float = FP_TOL):
    """Backward recursion on a controlled tree with exact expectations.

    ``driver(k, y, z) -> (n_k,)`` uses the relative slice index; None means a
    plain conditional expectation.  ``terminal`` is given at relative slice
    ``end`` (tree depth by default).  Returns (Y list, Z list, max residual)
    with lists indexed relative to ``stop``.
    """
    lat = tree.lattice
    depth = tree.depth if end is None else end
    B = lat.n_outcomes
    dt = lat.dt
    zw = (lat.probs[:, None] * lat.values) / dt  # (B, m)
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape[0] != B ** depth:
        raise ValueError(
            f"terminal has {terminal.shape[0]} entries, slice {depth} has {B ** depth}")
    Ys = [terminal]
    Zs = []
    resid = 0.0
    y = terminal
    for k in range(depth - 1, stop - 1, -1):
        per_child = y.reshape(-1, B)
        e = per_child @ lat.probs
        z = per_child @ zw
        if driver is None:
            y = e
        else:
            y = implicit_step(e, z, lambda yy: driver(k, yy, z), dt,
                              max_iter, tol)
            resid = max(resid, float(np.max(np.abs(
                y - e - dt * np.asarray(driver(k, y, z))))))
        Ys.append(y)
        Zs.append(z)
    Ys.reverse()
    Zs.reverse()
    return Ys, Zs, resid


def _spec_driver_on_tree(spec: ProblemSpec, tree: ControlledTree, driver):
    times = tree.lattice.time_grid.times
    r = tree.start_index
    fn = spec.driver if driver is None else driver

    def step(k, y, z):
        hist = tree.history(k)
        return np.asarray(fn(times[r + k], tree.states[k], y, z,
                             tree.theta[k], tree.gamma[k], hist))

    return step


def solve_lattice(spec: ProblemSpec, tree: ControlledTree, terminal=None,
                  driver=None, check_bound: bool | None = None) -> BsdeSolution:
    """Exact backward solve along a controlled tree.

    ``terminal`` is a per-leaf array or a callable (x, hist) -> payoff
    (problem terminal by default); ``driver`` overrides the problem driver
    with the same signature.  Requires dt * L < 1.
    """
    lat = tree.lattice
    check_step_contraction(lat.dt, spec.bound, "solve_lattice")
    if terminal is None:
        terminal = spec.terminal
    if callable(terminal):
        hist = tree.history(tree.depth)
        terminal = np.asarray(terminal(tree.states[-1], hist), dtype=float)
        terminal = np.broadcast_to(terminal, (tree.states[-1].shape[0],)).copy()
    step = _spec_driver_on_tree(spec, tree, driver)
    Ys, Zs, resid = tree_backward(tree, terminal, step)

    sol = BsdeSolution(scheme="lattice-exact", Y=Ys, Z=Zs,
                       start_index=tree.start_index, residual_max=resid,
                       value=float(Ys[0][0]))
    if check_bound is None:
        check_bound = driver is None
    if check_bound:
        # with a bounded driver the solution cannot exceed the Gronwall cap
        span = lat.dt * tree.depth
        f0 = 0.0
        times = lat.time_grid.times
        fn = spec.driver if driver is None else driver
        for k in range(tree.depth):
            z0 = np.zeros((tree.states[k].shape[0], lat.m))
            vals = np.asarray(fn(times[tree.start_index + k], tree.states[k],
                                 np.zeros(tree.states[k].shape[0]), z0,
                                 tree.theta[k], tree.gamma[k], tree.history(k)))
            f0 = max(f0, float(np.max(np.abs(vals))))
        cap = (float(np.max(np.abs(terminal))) + span * f0) * math.exp(2 * spec.bound * span)
        sol.apriori_bound = cap
        worst = max(float(np.max(np.abs(yk))) for yk in Ys)
        if worst > cap * (1 + 1e-9) + 1e-12:
            raise NumericsError(
                f"solution magnitude {worst:.4g} exceeds the a-priori cap {cap:.4g}")
    return sol


# ---------------------------------------------------------------------------
# Recombining-lattice backward (noise-only functionals)
# ---------------------------------------------------------------------------

def _recombining_children(lat: NoiseLattice, k: int) -> np.ndarray:
    """Flat child indices at slice k+1 for every (outcome, slice-k node)."""
    m = lat.m
    size_k = lat.axis_size(k)
    size_k1 = lat.axis_size(k + 1)
    idx = np.indices((size_k,) * m).reshape(m, -1)  # (m, n_k)
    offs = lat.child_offsets()  # (B, m)
    strides = size_k1 ** np.arange(m - 1, -1, -1)
    child = idx[None, :, :] + offs[:, :, None]  # (B, m, n_k)
    return np.einsum("bmn,m->bn", child, strides).astype(np.int64)


def recombining_backward(lat: NoiseLattice, k_lo: int, k_hi: int,
                         terminal: np.ndarray, driver=None,
                         max_iter: int = MAX_FP_ITER, tol: float = FP_TOL):
    """Backward solve on the recombining lattice for noise-only problems.

    ``terminal`` is given per recombining node at slice ``k_hi``;
    ``driver(t, w, y, z)`` sees the cumulative-noise positions ``w`` of the
    slice.  Returns (Y list from k_lo..k_hi, Z list, max residual).  Node
    counts grow polynomially, so long horizons are cheap -- this backend is
    only valid when the data depend on the noise alone.
    """
    if not 0 <= k_lo <= k_hi <= lat.time_grid.n_steps:
        raise ValueError("invalid slice window")
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape[0] != lat.slice_node_count(k_hi):
        raise ValueError(
            f"terminal has {terminal.shape[0]} entries, slice {k_hi} has "
            f"{lat.slice_node_count(k_hi)} recombining nodes")
    dt = lat.dt
    zw = (lat.probs[:, None] * lat.values) / dt
    times = lat.time_grid.times
    y = terminal
    Ys = [terminal]
    Zs = []
    resid = 0.0
    for k in range(k_hi - 1, k_lo - 1, -1):
        flat = _recombining_children(lat, k)  # (B, n_k)
        y_children = y[flat]  # (B, n_k)
        e = lat.probs @ y_children
        z = y_children.T @ zw  # (n_k, m)
        if driver is None:
            y = e
        else:
            w = lat.slice_positions(k)
            y = implicit_step(e, z, lambda yy: driver(times[k], w, yy, z), dt,
                              max_iter, tol)
            resid = max(resid, float(np.max(np.abs(
                y - e - dt * np.asarray(driver(times[k], w, y, z))))))
        Ys.append(y)
        Zs.append(z)
    Ys.reverse()
    Zs.reverse()
    return Ys, Zs, resid


# ---------------------------------------------------------------------------
# Least-squares Monte Carlo backward
# ---------------------------------------------------------------------------

def _poly_features(x: np.ndarray, degree: int) -> np.ndarray:
    """Total-degree monomial basis in the state coordinates."""
    import itertools

    n, d = x.shape
    cols = [np.ones(n)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            col = np.ones(n)
            for c in combo:
                col = col * x[:, c]
            cols.append(col)
    return np.stack(cols, axis=1)


def _regress(basis: np.ndarray, target: np.ndarray, state: dict):
    """Least squares via normal equations with a ridge fallback on rank loss."""
    G = basis.T @ basis
    c = basis.T @ target
    p = G.shape[0]
    if np.linalg.matrix_rank(G, tol=1e-10 * float(np.trace(G))) < p:
        lam = 1e-8 * float(np.trace(G))
        coef = np.linalg.solve(G + lam * np.eye(p), c)
        state["ridge"] = True
    else:
        coef = np.linalg.solve(G, c)
    return coef


def _lsmc_backward(spec: ProblemSpec, traj: StateTrajectory, k_lo: int, k_hi: int,
                   terminal: np.ndarray, bases: list, idx=None, driver=None):
    """One LSMC backward sweep, optionally on a path resample ``idx``."""
    ens = traj.ens
    dt = ens.dt
    times = ens.time_grid.times
    take = slice(None) if idx is None else idx
    y = terminal[take].astype(float, copy=True)
    state = {"ridge": False}
    residuals = []
    Ys = [y]
    Zs = []
    for k in range(k_hi - 1, k_lo - 1, -1):
        basis = bases[k][take]
        dw = ens.dW[take, k, :]
        coef_y = _regress(basis, y, state)
        e = basis @ coef_y
        residuals.append(float(np.mean((e - y) ** 2)))
        z = np.empty((basis.shape[0], spec.m))
        for j in range(spec.m):
            coef_z = _regress(basis, y * dw[:, j] / dt, state)
            z[:, j] = basis @ coef_z
        xk = traj.X[take, k, :]
        th, ga = traj.theta[take, k, :], traj.gamma[take, k, :]
        hist = _traj_history(spec, traj, k, take)
        fn = spec.driver if driver is None else driver
        y = implicit_step(e, z, lambda yy: np.asarray(
            fn(times[k], xk, yy, z, th, ga, hist)), dt)
        Ys.append(y)
        Zs.append(z)
    Ys.reverse()
    Zs.reverse()
    return Ys, Zs, residuals, state["ridge"]


def _traj_history(spec: ProblemSpec, traj: StateTrajectory, k: int, take):
    if not spec.uses_history():
        return None
    times = traj.ens.time_grid.times
    cols = []
    for tp in spec.history_times:
        i = int(np.argmin(np.abs(times - tp)))
        cols.append(traj.ens.W[take, min(i, k), :])
    return np.stack(cols, axis=1)


def lsmc_bases(spec: ProblemSpec, traj: StateTrajectory, degree: int) -> list:
    """Per-slice regression bases: polynomial in the state, history linear."""
    bases = []
    n_steps = traj.ens.time_grid.n_steps
    for k in range(n_steps):
        b = _poly_features(traj.X[:, k, :], degree)
        if spec.uses_history():
            hist = _traj_history(spec, traj, k, slice(None))
            b = np.concatenate([b, hist.reshape(hist.shape[0], -1)], axis=1)
        bases.append(b)
    return bases


def solve_lsmc(spec: ProblemSpec, traj: StateTrajectory, terminal=None,
               degree: int = 2, n_bootstrap: int = 100, seed: int = 7,
               driver=None) -> BsdeSolution:
    """Regression Monte Carlo backward solve along simulated paths.

    Conditional expectations of (Y_{k+1}, Y_{k+1} dW_k / dt) are least-squares
    projections on a total-degree polynomial basis of the state; the start
    value carries a bootstrap standard error over path resamples.
    """
    ens = traj.ens
    r = traj.start_index
    k_hi = ens.time_grid.n_steps
    if terminal is None:
        terminal = spec.terminal
    if callable(terminal):
        hist = _traj_history(spec, traj, k_hi, slice(None))
        terminal = np.asarray(terminal(traj.X[:, k_hi, :], hist), dtype=float)
        terminal = np.broadcast_to(terminal, (traj.n_paths,)).copy()
    terminal = np.asarray(terminal, dtype=float)
    bases = lsmc_bases(spec, traj, degree)
    n_basis = bases[r].shape[1]
    if traj.n_paths < 10 * n_basis:
        raise NumericsError(
            f"need n_paths >= 10 * basis size ({10 * n_basis}), got {traj.n_paths}")

    Ys, Zs, residuals, ridge = _lsmc_backward(spec, traj, r, k_hi, terminal,
                                              bases, None, driver)
    value = float(np.mean(Ys[0]))
    se = None
    if n_bootstrap > 0:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        reps = np.empty(n_bootstrap)
        for i in range(n_bootstrap):
            idx = rng.integers(0, traj.n_paths, traj.n_paths)
            yb, _, _, _ = _lsmc_backward(spec, traj, r, k_hi, terminal, bases,
                                         idx, driver)
            reps[i] = float(np.mean(yb[0]))
        se = float(np.std(reps, ddof=1))
    return BsdeSolution(scheme="lsmc", Y=Ys, Z=Zs, start_index=r,
                        value=value, value_se=se, basis_degree=degree,
                        ridge_fallback=ridge, regression_residuals=residuals)


# ---------------------------------------------------------------------------
# Semigroup, payoff, comparison
# ---------------------------------------------------------------------------

def semigroup_apply(spec: ProblemSpec, tree: ControlledTree, query: SemigroupQuery,
                    traj: StateTrajectory | None = None) -> np.ndarray:
    """Backward-semigroup image of a payoff given at a later slice.

    Lattice-exact: solves the recursion from ``query.end`` down to
    ``query.start`` on the tree, returning per-node values; start == end is
    the identity.  The Monte Carlo variant runs the regression sweep on the
    supplied trajectory instead.
    """
    eta = np.asarray(query.eta, dtype=float)
    if query.start == query.end:
        return eta.copy()
    if query.solver == "lattice-exact":
        step = _spec_driver_on_tree(spec, tree, None)
        Ys, _, _ = tree_backward(tree, eta, step, stop=query.start, end=query.end)
        return Ys[0]
    if query.solver == "lsmc":
        if traj is None:
            raise ValueError("lsmc semigroup needs a trajectory")
        bases = lsmc_bases(spec, traj, 2)
        Ys, _, _, _ = _lsmc_backward(spec, traj, query.start, query.end, eta, bases)
        return Ys[0]
    raise ValueError(f"unknown solver {query.solver!r}")


def payoff_value(spec: ProblemSpec, lattice: NoiseLattice, t_index: int, x,
                 theta, gamma, node_budget: int = 2_000_000,
                 enforce_bound: bool = True) -> float:
    """Recursive payoff J(t, x) under fixed controls, solved on the tree.

    The returned value obeys the uniform payoff cap L*(T+1) whenever the
    coefficients obey the bound assumption on the visited region.
    """
    tree = lattice_forward(spec, lattice, (t_index, x), theta, gamma, node_budget)
    sol = solve_lattice(spec, tree)
    val = sol.value
    cap = spec.bound * (lattice.time_grid.horizon + 1.0)
    if enforce_bound and abs(val) > cap * (1 + 1e-9) + 1e-12:
        raise NumericsError(
            f"payoff {val:.4g} exceeds the uniform cap {cap:.4g}; the "
            f"coefficients violate the bound assumption on this region")
    return val


def compare_bsde(spec: ProblemSpec, tree: ControlledTree, terminal1, terminal2,
                 driver1=None, driver2=None, tol: float = 1e-10):
    """Count nodewise order violations between two solves on one tree.

    For data ordered as terminal1 <= terminal2 and driver1 <= driver2 along
    the second solution, the scheme preserves Y1 <= Y2 nodewise whenever the
    one-step map is monotone; the returned count is the number of nodes where
    Y1 > Y2 + tol (contract: zero), along with the worst violation.
    """
    sol1 = solve_lattice(spec, tree, terminal1, driver1, check_bound=False)
    sol2 = solve_lattice(spec, tree, terminal2, driver2, check_bound=False)
    count = 0
    worst = 0.0
    for y1, y2 in zip(sol1.Y, sol2.Y):
        excess = y1 - y2
        count += int(np.sum(excess > tol))
        worst = max(worst, float(np.max(excess)))
    return count, worst


# ---------------------------------------------------------------------------
# Coefficient-freezing gap
# ---------------------------------------------------------------------------

def freezing_gap(spec: ProblemSpec, test_field: TestField, xi, deltas,
                 theta_point, gamma_point, n_steps: int = 16, branching: int = 2,
                 tau: float = 0.0, check_field: bool = True):
    """Gap between the moving-state and frozen-state auxiliary solutions.

    For each horizon delta the field-shifted driver is solved twice on one
    tree started at ``xi`` with zero terminal data: once along the simulated
    state and once with the spatial argument frozen at ``xi``.  Returns the
    per-delta absolute gaps at the root together with the measured spatial
    modulus of the shifted driver.  The gaps shrink superlinearly in delta
    and grow at most linearly in 1 + |xi|.
    """
    from .grids import build_lattice

    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if check_field:
        test_field.check_derivatives(spec.d)
    gaps = {}
    for delta in deltas:
        grid = TimeGrid(tau, tau + delta, n_steps)
        lat = build_lattice(grid, spec.m, branching)
        tree = lattice_forward(spec, lat, (0, xi),
                               Control.constant(theta_point),
                               Control.constant(gamma_point))
        times = grid.times
        frozen = np.broadcast_to(xi, (1, spec.d))

        def moving(k, y, z):
            return field_shifted_driver(test_field, spec, times[k],
                                        tree.states[k], y, z,
                                        tree.theta[k], tree.gamma[k])

        def still(k, y, z):
            pts = np.broadcast_to(xi, (y.shape[0], spec.d))
            return field_shifted_driver(test_field, spec, times[k], pts, y, z,
                                        tree.theta[k], tree.gamma[k])

        zeros = np.zeros(tree.states[-1].shape[0])
        y1, _, _ = tree_backward(tree, zeros, moving)
        y2, _, _ = tree_backward(tree, zeros, still)
        gaps[float(delta)] = abs(float(y1[0][0]) - float(y2[0][0]))
    modulus = driver_lipschitz_modulus(test_field, spec, tau)
    return gaps, modulus
