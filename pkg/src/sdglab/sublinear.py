"""Sublinear conditional expectations defined through backward equations.

The upper functional solves the backward equation with driver
``+K(|y| + |z|)`` and the lower one its minus-sign twin; at K = 0 both reduce
to the plain conditional expectation.  On the lattice every solve is an exact
weighted sum, so the pair's algebra -- duality under negation, positive
homogeneity, monotonicity in K, superadditivity below and subadditivity
above -- can be checked to floating-point precision.

Exponential tilt weights give the dual side: any piecewise-constant tilt
(h0, h) bounded by K in sup norm produces a weighted expectation sandwiched
between the lower and upper functionals up to an O(dt) consistency term, and
the two-sided domination of backward-semigroup differences by the K = L
functionals is the executable form of the comparison principle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bsde import recombining_backward, solve_lattice, tree_backward
from .grids import NoiseLattice
from .problems import ProblemSpec
from .sde import ControlledTree

__all__ = [
    "SublinearQuery",
    "sublinear_eval",
    "sublinear_eval_tree",
    "closed_form_measurable",
    "tilt_expectation",
    "domination_suite",
    "DominationReport",
]


@dataclass(frozen=True)
class SublinearQuery:
    """Evaluation request: functional level K, slice window, payoff, direction."""

    K: float
    start: int  # tau_1, grid slice index
    end: int  # tau_2, grid slice index
    xi: object  # array per node at the end slice, or callable of noise positions
    direction: str = "upper"  # or "lower"

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be nonnegative")
        if not 0 <= self.start <= self.end:
            raise ValueError("need 0 <= start <= end")
        if self.direction not in ("upper", "lower"):
            raise ValueError("direction must be 'upper' or 'lower'")


def _sublinear_driver(K: float, sign: float):
    def driver(_t, _w, y, z):
        return sign * K * (np.abs(y) + np.linalg.norm(z, axis=-1))

    return driver


def sublinear_eval(query: SublinearQuery, lattice: NoiseLattice) -> np.ndarray:
    """Evaluate the functional on the recombining lattice.

    ``query.xi`` is an array over the recombining nodes of the end slice or a
    callable of their cumulative-noise positions.  Returns per-node values at
    the start slice (a length-1 array when the window starts at slice 0).
    """
    xi = query.xi
    if callable(xi):
        xi = np.asarray(xi(lattice.slice_positions(query.end)), dtype=float)
    xi = np.asarray(xi, dtype=float)
    if query.K == 0.0:
        ys, _, _ = recombining_backward(lattice, query.start, query.end, xi)
        return ys[0]
    sign = 1.0 if query.direction == "upper" else -1.0
    ys, _, _ = recombining_backward(lattice, query.start, query.end, xi,
                                    _sublinear_driver(query.K, sign))
    return ys[0]


def sublinear_eval_tree(tree: ControlledTree, start: int, end: int, xi,
                        K: float, direction: str = "upper") -> np.ndarray:
    """Same functional on a controlled tree, for path-dependent payoffs.

    ``xi`` is an array over the tree nodes of relative slice ``end``; the
    result is per-node at relative slice ``start``.
    """
    if K < 0:
        raise ValueError("K must be nonnegative")
    sign = 1.0 if direction == "upper" else -1.0
    xi = np.asarray(xi, dtype=float)
    if K == 0.0:
        ys, _, _ = tree_backward(tree, xi, None, stop=start, end=end)
        return ys[0]

    def driver(_k, y, z):
        return sign * K * (np.abs(y) + np.linalg.norm(z, axis=-1))

    ys, _, _ = tree_backward(tree, xi, driver, stop=start, end=end)
    return ys[0]


def closed_form_measurable(xi_val, K: float, delta: float, direction: str = "upper"):
    """Closed form for payoffs already known at the start slice.

    Upper: xi+ e^{K delta} - xi- e^{-K delta};
    lower: xi+ e^{-K delta} - xi- e^{K delta}.  Vectorized in ``xi_val``.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    xi = np.asarray(xi_val, dtype=float)
    pos, neg = np.maximum(xi, 0.0), np.maximum(-xi, 0.0)
    up, dn = math.exp(K * delta), math.exp(-K * delta)
    if direction == "upper":
        out = pos * up - neg * dn
    elif direction == "lower":
        out = pos * dn - neg * up
    else:
        raise ValueError("direction must be 'upper' or 'lower'")
    return float(out) if np.isscalar(xi_val) else out


def tilt_expectation(lattice: NoiseLattice, start: int, end: int, xi,
                     h0, h, K: float):
    """Exact exponentially tilted conditional expectation on the lattice.

    ``h0`` is (n_steps_window,) and ``h`` (n_steps_window, m), piecewise
    constant per step, with each concatenated vector (h0_k, h_k) bounded by K
    in Euclidean norm.  Returns (values at the start slice, tolerance), where
    the tolerance is the O(dt) consistency margin within which the tilted
    value is sandwiched by the lower/upper functionals at level K.
    """
    xi_arr = xi
    if callable(xi):
        xi_arr = np.asarray(xi(lattice.slice_positions(end)), dtype=float)
    xi_arr = np.asarray(xi_arr, dtype=float)
    steps = end - start
    h0 = np.broadcast_to(np.asarray(h0, dtype=float).reshape(-1), (steps,))
    h = np.broadcast_to(np.atleast_2d(np.asarray(h, dtype=float)), (steps, lattice.m))
    norms = np.sqrt(h0 ** 2 + np.sum(h * h, axis=1))
    if np.any(norms > K + 1e-12):
        raise ValueError(
            f"tilt norm {float(np.max(norms)):.4g} exceeds the level K={K}")
    dt = lattice.dt
    from .bsde import _recombining_children

    y = xi_arr.copy()
    for k in range(end - 1, start - 1, -1):
        j = k - start
        weight = np.exp(lattice.values @ h[j]
                        - 0.5 * (float(h[j] @ h[j]) + 2.0 * h0[j]) * dt)
        flat = _recombining_children(lattice, k)
        y = (lattice.probs * weight) @ y[flat]
    tol = 5.0 * dt * K * max(1.0, float(np.max(np.abs(xi_arr))))
    return y, tol


# ---------------------------------------------------------------------------
# Domination relations
# ---------------------------------------------------------------------------

@dataclass
class DominationReport:
    """Outcome of the three domination checks on one instance."""

    chain_ok: bool
    chain_margin: float  # most negative slack in the two-sided chain
    sqrt_ok: bool
    sqrt_margin: float
    square_ok: bool
    square_margin: float
    tolerance_chain: float
    tolerance_moment: float

    @property
    def all_ok(self) -> bool:
        return self.chain_ok and self.sqrt_ok and self.square_ok


def domination_suite(spec: ProblemSpec, tree: ControlledTree, start: int,
                     xi1, xi2, K: float | None = None,
                     chain_tol: float = 1e-9) -> DominationReport:
    """Run the three domination checks on a controlled tree.

    (a) the semigroup difference G[xi1] - G[xi2] lies nodewise between the
        lower and upper functionals of xi1 - xi2 at level L;
    (b) E[sqrt|xi1|] <= sqrt( lower-functional of |xi1| * e^{(K+2)K Delta} );
    (c) upper-functional of |xi1| <= sqrt( e^{(K+2)K Delta} * E[|xi1|^2] );
    (b) and (c) hold up to an O(dt) consistency tolerance that is reported.
    """
    lat = tree.lattice
    L = spec.bound if K is None else K
    end = tree.depth
    xi1 = np.asarray(xi1, dtype=float)
    xi2 = np.asarray(xi2, dtype=float)
    dt = lat.dt
    delta = dt * (end - start)

    g1 = solve_lattice(spec, tree, xi1, check_bound=False)
    g2 = solve_lattice(spec, tree, xi2, check_bound=False)
    diff = g1.Y[start] - g2.Y[start]
    lo = sublinear_eval_tree(tree, start, end, xi1 - xi2, L, "lower")
    hi = sublinear_eval_tree(tree, start, end, xi1 - xi2, L, "upper")
    chain_margin = float(min(np.min(diff - lo), np.min(hi - diff)))
    chain_ok = chain_margin >= -chain_tol

    # conditional moments of |xi1|, exact on the tree
    def expect(values):
        ys, _, _ = tree_backward(tree, values, None, stop=start, end=end)
        return ys[0]

    blow = math.exp((L + 2.0) * L * delta)
    e_sqrt = expect(np.sqrt(np.abs(xi1)))
    e_sq = expect(xi1 ** 2)
    low_abs = sublinear_eval_tree(tree, start, end, np.abs(xi1), L, "lower")
    up_abs = sublinear_eval_tree(tree, start, end, np.abs(xi1), L, "upper")
    scale = max(1.0, float(np.max(np.abs(xi1))))
    moment_tol = 5.0 * dt * L * (1.0 + L) * scale * blow
    sqrt_margin = float(np.min(np.sqrt(np.maximum(low_abs, 0.0) * blow) - e_sqrt))
    square_margin = float(np.min(np.sqrt(blow * e_sq) - up_abs))
    return DominationReport(
        chain_ok=chain_ok, chain_margin=chain_margin,
        sqrt_ok=sqrt_margin >= -moment_tol, sqrt_margin=sqrt_margin,
        square_ok=square_margin >= -moment_tol, square_margin=square_margin,
        tolerance_chain=chain_tol, tolerance_moment=moment_tol)
