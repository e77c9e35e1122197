"""Forward simulation of the controlled state dynamics.

Two backends share one convention: controls act on [t_k, t_{k+1}) using
information up to t_k (predictable timing), and the Euler step is

    X_{k+1} = X_k + b(t_k, X_k, theta_k, gamma_k) dt
                  + sigma(t_k, X_k, theta_k, gamma_k) dW_k.

``euler_forward`` runs the step over a Gaussian path ensemble.  With
state-dependent coefficients the controlled state does not recombine on the
noise lattice, so ``lattice_forward`` materializes the full product tree
(every node has one child per joint noise outcome) under an explicit node
budget, storing exact probability weights for later exact expectations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grids import NoiseLattice, PathEnsemble
from .problems import ProblemSpec

__all__ = [
    "Control",
    "StateTrajectory",
    "ControlledTree",
    "euler_forward",
    "lattice_forward",
    "check_flow_property",
    "moment_estimates",
    "BudgetError",
]


class BudgetError(RuntimeError):
    """Raised when a tree would exceed its node budget."""


class SimulationError(RuntimeError):
    """Raised on non-finite coefficient output during forward simulation."""


# ---------------------------------------------------------------------------
# Controls
# ---------------------------------------------------------------------------

class Control:
    """A grid-valued control process: constant, open-loop, or feedback.

    Feedback controls are pure maps (k, x, hist) -> control point, vectorized
    over the leading axis of ``x`` ((n, d) in, (n, n_dims) out).  Open-loop
    controls are arrays of points per step ((n_steps, n_dims)) or per path and
    step ((n_paths, n_steps, n_dims)).
    """

    def __init__(self, kind: str, data):
        self.kind = kind
        self.data = data

    @classmethod
    def constant(cls, point) -> "Control":
        return cls("constant", np.atleast_1d(np.asarray(point, dtype=float)))

    @classmethod
    def open_loop(cls, points) -> "Control":
        arr = np.asarray(points, dtype=float)
        if arr.ndim not in (2, 3):
            raise ValueError("open-loop control must be (n_steps, c) or "
                             "(n_paths, n_steps, c)")
        return cls("open-loop", arr)

    @classmethod
    def feedback(cls, fn: Callable) -> "Control":
        return cls("feedback", fn)

    def at(self, k: int, x: np.ndarray, hist=None) -> np.ndarray:
        """Control points for step k, broadcastable against x (n, d)."""
        if self.kind == "constant":
            return self.data[None, :]
        if self.kind == "open-loop":
            if self.data.ndim == 2:
                return self.data[k][None, :]
            return self.data[:, k, :]
        out = np.asarray(self.data(k, x, hist), dtype=float)
        if out.ndim == 1:
            out = out[None, :] if out.shape[0] != x.shape[0] else out[:, None]
        return out


def _as_control(c) -> Control:
    if isinstance(c, Control):
        return c
    return Control.constant(c)


# ---------------------------------------------------------------------------
# Monte Carlo forward
# ---------------------------------------------------------------------------

@dataclass
class StateTrajectory:
    """Euler states on an ensemble, with the realized per-step controls."""

    spec: ProblemSpec
    ens: PathEnsemble
    start_index: int
    X: np.ndarray  # (n_paths, n_steps+1, d); frozen at the initial state before start
    theta: np.ndarray  # (n_paths, n_steps, p)
    gamma: np.ndarray  # (n_paths, n_steps, q)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]


def _mc_history(spec: ProblemSpec, ens: PathEnsemble, k: int):
    """W at the problem's partition times, truncated at t_k, per path."""
    if not spec.uses_history():
        return None
    times = ens.time_grid.times
    cols = []
    for tp in spec.history_times:
        idx = int(np.argmin(np.abs(times - tp)))
        cols.append(ens.W[:, min(idx, k), :])
    return np.stack(cols, axis=1)


def euler_forward(spec: ProblemSpec, ens: PathEnsemble, start, theta, gamma) -> StateTrajectory:
    """Simulate the controlled state over the ensemble from ``start``.

    ``start`` is (step index r, state) where the state is a d-vector shared by
    all paths or an (n_paths, d) array of per-path initial states.
    """
    r, x0 = start
    n_paths, n_steps = ens.n_paths, ens.time_grid.n_steps
    if not 0 <= r < n_steps:
        raise ValueError(f"start step {r} outside [0, {n_steps})")
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (n_paths, spec.d))
    if x0.shape != (n_paths, spec.d):
        raise ValueError(f"initial state shape {x0.shape} does not match "
                         f"(n_paths, d)=({n_paths}, {spec.d})")
    theta, gamma = _as_control(theta), _as_control(gamma)

    d = spec.d
    X = np.empty((n_paths, n_steps + 1, d))
    X[:, : r + 1] = x0[:, None, :]
    th_real = np.empty((n_paths, n_steps, _control_dim(theta, spec, "theta")))
    ga_real = np.empty((n_paths, n_steps, _control_dim(gamma, spec, "gamma")))
    th_real[:, :r] = 0.0
    ga_real[:, :r] = 0.0

    dt = ens.dt
    times = ens.time_grid.times
    for k in range(r, n_steps):
        hist = _mc_history(spec, ens, k)
        xk = X[:, k]
        th = np.broadcast_to(theta.at(k, xk, hist), (n_paths, th_real.shape[2]))
        ga = np.broadcast_to(gamma.at(k, xk, hist), (n_paths, ga_real.shape[2]))
        th_real[:, k] = th
        ga_real[:, k] = ga
        b = np.broadcast_to(np.asarray(spec.drift(times[k], xk, th, ga, hist)),
                            (n_paths, d))
        sig = np.broadcast_to(np.asarray(spec.diffusion(times[k], xk, th, ga, hist)),
                              (n_paths, d, spec.m))
        step = xk + b * dt + np.einsum("pdm,pm->pd", sig, ens.dW[:, k])
        if not np.all(np.isfinite(step)):
            bad = np.argwhere(~np.isfinite(step))
            raise SimulationError(
                f"non-finite state at path {bad[0][0]}, step {k}")
        X[:, k + 1] = step
    return StateTrajectory(spec=spec, ens=ens, start_index=r, X=X,
                           theta=th_real, gamma=ga_real)


def _control_dim(ctrl: Control, spec: ProblemSpec, which: str) -> int:
    grid = spec.theta_grid if which == "theta" else spec.gamma_grid
    if ctrl.kind == "constant":
        return len(ctrl.data)
    if ctrl.kind == "open-loop":
        return ctrl.data.shape[-1]
    return grid.n_dims


# ---------------------------------------------------------------------------
# Exact tree forward
# ---------------------------------------------------------------------------

@dataclass
class ControlledTree:
    """Non-recombining product tree of Euler states under fixed controls.

    Slice k (relative to the start slice r) has ``B**k`` nodes, B the number
    of joint noise outcomes; node i at slice k+1 has parent ``i // B`` and
    noise outcome ``i % B``.  ``states[k]``, ``w[k]``, ``theta[k]``/``gamma[k]``
    hold per-node states, cumulative noise and realized controls.
    """

    spec: ProblemSpec
    lattice: NoiseLattice
    start_index: int
    states: list = field(repr=False)  # k -> (B^k, d)
    w: list = field(repr=False)  # k -> (B^k, m) cumulative noise, 0 at root
    theta: list = field(repr=False)  # k -> (B^k, p), per step k < depth
    gamma: list = field(repr=False)
    w_offset: np.ndarray | None = None  # noise level at the start slice
    frozen_hist: np.ndarray | None = None  # (N, m) partition snapshot at start

    @property
    def depth(self) -> int:
        return len(self.states) - 1

    @property
    def n_outcomes(self) -> int:
        return self.lattice.n_outcomes

    def slice_weights(self, k: int) -> np.ndarray:
        """Exact node probabilities at relative slice k (product measure)."""
        wts = np.array([1.0])
        for _ in range(k):
            wts = (wts[:, None] * self.lattice.probs[None, :]).ravel()
        return wts

    def history(self, k: int):
        """Per-node partition noise history at relative slice k, or None."""
        spec = self.spec
        if not spec.uses_history():
            return None
        times = self.lattice.time_grid.times
        t_abs = self.start_index + k
        n_k = self.states[k].shape[0]
        B = self.n_outcomes
        cols = []
        for j, tp in enumerate(spec.history_times):
            idx = int(np.argmin(np.abs(times - tp)))
            if idx <= self.start_index:
                base = (self.frozen_hist[j] if self.frozen_hist is not None
                        else np.zeros(spec.m))
                cols.append(np.broadcast_to(base, (n_k, spec.m)))
            else:
                rel = min(idx - self.start_index, k)
                anc = self.w[rel][np.arange(n_k) // (B ** (k - rel))]
                off = self.w_offset if self.w_offset is not None else 0.0
                cols.append(anc + off)
        return np.stack(cols, axis=1)


def lattice_forward(spec: ProblemSpec, lattice: NoiseLattice, start, theta, gamma,
                    node_budget: int = 2_000_000, n_steps: int | None = None,
                    w_offset=None, frozen_hist=None) -> ControlledTree:
    """Materialize the controlled state tree from ``start`` under a node budget.

    ``start`` is (slice index r, state x); the tree runs to the final grid
    slice unless ``n_steps`` caps the depth.  Controls may be constant,
    deterministic open-loop, or feedback maps of (k, states, hist).
    """
    r, x0 = start
    total_steps = lattice.time_grid.n_steps
    depth = (total_steps - r) if n_steps is None else n_steps
    if depth < 0 or r + depth > total_steps:
        raise ValueError("tree depth exceeds the time grid")
    B = lattice.n_outcomes
    est = (B ** (depth + 1) - 1) // (B - 1) if B > 1 else depth + 1
    if est > node_budget:
        raise BudgetError(
            f"tree needs {est} nodes, exceeding the budget of {node_budget}; "
            f"reduce n_steps or raise node_budget")
    theta, gamma = _as_control(theta), _as_control(gamma)

    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).reshape(1, spec.d)
    states = [x0]
    w = [np.zeros((1, lattice.m))]
    th_list, ga_list = [], []
    times = lattice.time_grid.times
    dt = lattice.dt
    tree = ControlledTree(spec=spec, lattice=lattice, start_index=r,
                          states=states, w=w, theta=th_list, gamma=ga_list,
                          w_offset=None if w_offset is None else np.asarray(w_offset, dtype=float),
                          frozen_hist=None if frozen_hist is None else np.asarray(frozen_hist, dtype=float))
    for k in range(depth):
        xk = states[k]
        n_k = xk.shape[0]
        hist = tree.history(k)
        th = np.broadcast_to(theta.at(k, xk, hist), (n_k, _control_dim(theta, spec, "theta")))
        ga = np.broadcast_to(gamma.at(k, xk, hist), (n_k, _control_dim(gamma, spec, "gamma")))
        th_list.append(th)
        ga_list.append(ga)
        t_k = times[r + k]
        b = np.broadcast_to(np.asarray(spec.drift(t_k, xk, th, ga, hist)), (n_k, spec.d))
        sig = np.broadcast_to(np.asarray(spec.diffusion(t_k, xk, th, ga, hist)),
                              (n_k, spec.d, lattice.m))
        drifted = xk + b * dt  # (n_k, d)
        jumps = np.einsum("ndm,om->nod", sig, lattice.values)  # (n_k, B, d)
        child = (drifted[:, None, :] + jumps).reshape(n_k * B, spec.d)
        if not np.all(np.isfinite(child)):
            bad = np.argwhere(~np.isfinite(child.reshape(n_k, B, spec.d)))
            raise SimulationError(
                f"non-finite state below node {bad[0][0]}, step {k}")
        states.append(child)
        w.append((w[k][:, None, :] + lattice.values[None, :, :]).reshape(n_k * B, lattice.m))
    return tree


def check_flow_property(spec: ProblemSpec, lattice: NoiseLattice, r: int, t: int,
                        x, theta, gamma, node_budget: int = 2_000_000) -> float:
    """Max discrepancy between a full tree and its restart at slice t.

    Builds the tree from (r, x), then for every slice-t node rebuilds the
    subtree from that node's state and compares terminal slices; with pure
    coefficients and identical recursion the discrepancy is zero up to
    floating-point noise.
    """
    if not r < t <= lattice.time_grid.n_steps:
        raise ValueError("need r < t <= n_steps")
    full = lattice_forward(spec, lattice, (r, x), theta, gamma, node_budget)
    k_t = t - r
    leaves = full.states[-1]
    B = full.n_outcomes
    depth_rest = full.depth - k_t
    per_node = B ** depth_rest
    worst = 0.0
    for node in range(full.states[k_t].shape[0]):
        frozen = None
        if spec.uses_history():
            hist_t = full.history(k_t)
            frozen = hist_t[node]
        sub = lattice_forward(
            spec, lattice, (t, full.states[k_t][node]), theta, gamma,
            node_budget, n_steps=depth_rest,
            w_offset=full.w[k_t][node], frozen_hist=frozen)
        orig = leaves[node * per_node:(node + 1) * per_node]
        worst = max(worst, float(np.max(np.abs(orig - sub.states[-1]))))
    return worst


# ---------------------------------------------------------------------------
# Moment statistics
# ---------------------------------------------------------------------------

@dataclass
class MomentReport:
    """Monte Carlo estimates of the running-max, increment and coupling moments."""

    sup_moment: float  # E[max_k |X_k|^p]
    increment_moment: float  # E[|X_s - X_t|^p] for the chosen pair
    sensitivity: float | None  # E[max_k |X_k - X'_k|^p] under coupled noise
    p: int
    s_index: int
    t_index: int


def moment_estimates(spec: ProblemSpec, ens: PathEnsemble, r: int, xi, theta, gamma,
                     p: int = 2, xi_hat=None, s_index: int | None = None,
                     t_index: int | None = None) -> MomentReport:
    """Estimate the three moment statistics of the controlled state.

    ``xi``/``xi_hat`` are initial states (possibly per path); the sensitivity
    statistic couples both runs through the same noise.  ``p`` in {2, 4}.
    """
    if p not in (2, 4):
        raise ValueError("p must be 2 or 4")
    n_steps = ens.time_grid.n_steps
    t_idx = r if t_index is None else t_index
    s_idx = n_steps if s_index is None else s_index
    traj = euler_forward(spec, ens, (r, xi), theta, gamma)
    tail = traj.X[:, r:]
    norms = np.linalg.norm(tail, axis=-1)
    sup_moment = float(np.mean(np.max(norms, axis=1) ** p))
    inc = np.linalg.norm(traj.X[:, s_idx] - traj.X[:, t_idx], axis=-1)
    increment_moment = float(np.mean(inc ** p))
    sensitivity = None
    if xi_hat is not None:
        other = euler_forward(spec, ens, (r, xi_hat), theta, gamma)
        diff = np.linalg.norm(traj.X[:, r:] - other.X[:, r:], axis=-1)
        sensitivity = float(np.mean(np.max(diff, axis=1) ** p))
    return MomentReport(sup_moment=sup_moment, increment_moment=increment_moment,
                        sensitivity=sensitivity, p=p, s_index=s_idx, t_index=t_idx)
