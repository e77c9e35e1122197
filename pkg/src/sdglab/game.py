"""Discrete lower/upper game values, their dynamic programming structure,
and near-optimal strategy extraction.

The backward recursion applies, at every reachable state node,

    lower:  V_k = max over theta of min over gamma of y(theta, gamma)
    upper:  V_k = min over gamma of max over theta of y(theta, gamma)

where y(theta, gamma) is the implicit one-step backward value whose children
are the Euler states stepped by that control pair over the exact noise
outcomes.  The stagewise max-min equals the infimum over one-step response
maps gamma = mu(theta) of the supremum over theta (a finite identity), which
is how the strategy-versus-control formulation collapses in discrete time;
``dpp_residual`` re-verifies that collapse by enumerating the response maps
explicitly over multi-step windows.

States reached under *all* control pairs and noise outcomes are deduplicated
per slice (after rounding to a fixed number of decimals), so problems whose
dynamics recombine -- control-independent diffusions with grid-commensurate
drifts, in particular -- stay polynomial in the horizon; genuinely
non-recombining dynamics hit the node budget and fail loudly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .bsde import check_step_contraction, implicit_step, solve_lsmc
from .grids import NoiseLattice
from .problems import ControlGrid, ProblemSpec
from .sde import BudgetError, Control, euler_forward

__all__ = [
    "ValueField",
    "StrategyProfile",
    "solve_value",
    "dpp_residual",
    "dpp_mc_check",
    "extract_epsilon_optimal",
    "deviation_test",
    "value_on_probes",
    "regularity_suite",
    "stability_suite",
    "value_gap",
]


def _lattice_key(lat: NoiseLattice) -> str:
    tg = lat.time_grid
    return (f"{tg.t0:.17g}|{tg.horizon:.17g}|{tg.n_steps}|{lat.branching}|{lat.m}")


def _round_keys(arr: np.ndarray, decimals: int) -> np.ndarray:
    # adding 0.0 turns -0.0 into +0.0 so keys are canonical
    return np.round(arr, decimals) + 0.0


@dataclass
class ValueField:
    """A computed value field on the deduplicated state DAG.

    ``states[k]`` holds the (sorted, unique) slice-k states; ``values[k]`` the
    node values.  For the lower field the policy is the maximizer's pick
    ``policy_theta[k]`` plus the per-theta response ``policy_gamma[k]``
    (n_k, n_theta); the upper field stores the mirrored pair.
    """

    side: str
    spec: ProblemSpec
    lattice: NoiseLattice
    theta_grid: ControlGrid
    gamma_grid: ControlGrid
    start_index: int
    root_state: np.ndarray
    states: list = field(repr=False)
    hists: list | None = field(repr=False, default=None)
    values: list = field(repr=False, default_factory=list)
    policy_theta: list = field(repr=False, default_factory=list)
    policy_gamma: list = field(repr=False, default_factory=list)
    dedup_decimals: int = 12
    node_total: int = 0
    provenance: tuple = ()

    @property
    def depth(self) -> int:
        return len(self.states) - 1

    def root_value(self) -> float:
        return float(self.values[0][0])

    def node_index(self, k: int, x) -> int:
        """Index of the slice-k node nearest to x (exact for on-DAG states)."""
        pts = self.states[k]
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return int(np.argmin(np.linalg.norm(pts - x[None, :], axis=1)))


@dataclass
class StrategyProfile:
    """Greedy feedback profile read off a value field.

    The response maps consult only the current slice and node, so they are
    nonanticipative by construction.  ``epsilon`` is the measured gap between
    the on-profile payoff and the value field (zero up to roundoff on the
    exact DAG).
    """

    field_ref: ValueField
    epsilon: float
    payoff_values: list = None  # on-profile payoff per (slice, node)

    def theta_index(self, k: int, node: int) -> int:
        f = self.field_ref
        if f.side == "lower":
            return int(f.policy_theta[k][node])
        gstar = int(f.policy_gamma[k][node])
        return int(f.policy_theta[k][node, gstar])

    def gamma_index(self, k: int, node: int, theta_index: int | None = None) -> int:
        f = self.field_ref
        if f.side == "lower":
            th = self.theta_index(k, node) if theta_index is None else theta_index
            return int(f.policy_gamma[k][node, th])
        return int(f.policy_gamma[k][node])


# ---------------------------------------------------------------------------
# DAG construction and one-step tables
# ---------------------------------------------------------------------------

def _expand_children(spec, lat, th_pts, ga_pts, xk, hist_k, t_k, k_abs, decimals):
    """All Euler children of a slice: returns (child_states, child_hists)
    flattened over (node, theta, gamma, outcome)."""
    n = xk.shape[0]
    n_th, n_ga, B = th_pts.shape[0], ga_pts.shape[0], lat.n_outcomes
    X = xk[:, None, None, :]
    TH = th_pts[None, :, None, :]
    GA = ga_pts[None, None, :, :]
    H = None if hist_k is None else hist_k[:, None, None, :, :]
    b = np.broadcast_to(np.asarray(spec.drift(t_k, X, TH, GA, H)),
                        (n, n_th, n_ga, spec.d))
    sig = np.broadcast_to(np.asarray(spec.diffusion(t_k, X, TH, GA, H)),
                          (n, n_th, n_ga, spec.d, lat.m))
    drifted = X + b * lat.dt
    jumps = np.einsum("ntgdm,om->ntgod", sig, lat.values)
    children = _round_keys((drifted[..., None, :] + jumps).reshape(-1, spec.d),
                           decimals)
    child_h = None
    if hist_k is not None:
        n_hist = hist_k.shape[1]
        # broadcast over (theta, gamma), then add the outcome increment to
        # every not-yet-frozen history column
        ch = np.broadcast_to(hist_k[:, None, None, None, :, :],
                             (n, n_th, n_ga, B, n_hist, lat.m)).copy()
        times = lat.time_grid.times
        for j, tp in enumerate(spec.history_times):
            idx = int(np.argmin(np.abs(times - tp)))
            if idx > k_abs:
                ch[..., j, :] += lat.values[None, None, None, :, :]
        child_h = _round_keys(ch.reshape(-1, n_hist * lat.m), decimals)
    return children, child_h


def _dedup_rows(keys: np.ndarray, snap: float):
    """Sorted unique rows with near-duplicates (within ``snap``) merged.

    Rounding alone leaves ulp-straddling twins of one logical state; merging
    lexicographically adjacent rows closer than ``snap`` collapses them.  The
    procedure is a pure function of the input, so the forward and backward
    passes reproduce identical node sets.
    """
    if keys.shape[1] == 1:
        flat = keys[:, 0]
        uniq, inverse = np.unique(flat, return_inverse=True)
        if uniq.shape[0] > 1:
            close = np.diff(uniq) < snap
            cluster = np.concatenate([[0], np.cumsum(~close)])
            _, first = np.unique(cluster, return_index=True)
            uniq = uniq[first]
            inverse = cluster[inverse]
        return uniq[:, None], inverse
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    if uniq.shape[0] > 1:
        close = np.max(np.abs(uniq[1:] - uniq[:-1]), axis=1) < snap
        cluster = np.concatenate([[0], np.cumsum(~close)])
        _, first = np.unique(cluster, return_index=True)
        uniq = uniq[first]
        inverse = cluster[np.asarray(inverse).ravel()]
    return uniq, inverse


def _slice_step(spec, lat, th_pts, ga_pts, xk, hist_k, t_k, k_abs, decimals):
    """Children of slice k_abs plus the dedup inverse used both ways."""
    children, child_h = _expand_children(spec, lat, th_pts, ga_pts, xk, hist_k,
                                         t_k, k_abs, decimals)
    keys = children if child_h is None else np.concatenate([children, child_h],
                                                           axis=1)
    uniq, inverse = _dedup_rows(keys, snap=2.0 * 10.0 ** (-decimals))
    next_states = uniq[:, :spec.d]
    next_hist = None
    if child_h is not None:
        n_hist = len(spec.history_times)
        next_hist = uniq[:, spec.d:].reshape(-1, n_hist, lat.m)
    return next_states, next_hist, inverse.reshape(
        xk.shape[0], th_pts.shape[0], ga_pts.shape[0], lat.n_outcomes)


def _one_step_tables(fld: ValueField, k: int, v_next: np.ndarray) -> np.ndarray:
    """Implicit one-step backward values y(theta, gamma) at every slice-k node."""
    spec, lat = fld.spec, fld.lattice
    th_pts, ga_pts = fld.theta_grid.points, fld.gamma_grid.points
    xk = fld.states[k]
    hist_k = None if fld.hists is None else fld.hists[k]
    t_k = lat.time_grid.times[fld.start_index + k]
    _, _, inverse = _slice_step(spec, lat, th_pts, ga_pts, xk, hist_k, t_k,
                                fld.start_index + k, fld.dedup_decimals)
    vc = v_next[inverse]  # (n, n_th, n_ga, B)
    e = vc @ lat.probs
    zw = (lat.probs[:, None] * lat.values) / lat.dt
    z = np.einsum("ntgo,om->ntgm", vc, zw)
    n = xk.shape[0]
    X = xk[:, None, None, :]
    TH = th_pts[None, :, None, :]
    GA = ga_pts[None, None, :, :]
    H = None if hist_k is None else hist_k[:, None, None, :, :]

    def f_of_y(y):
        return np.broadcast_to(np.asarray(
            spec.driver(t_k, X, y, z, TH, GA, H)), e.shape)

    return implicit_step(e, z, f_of_y, lat.dt)


def _optimize(y_table: np.ndarray, side: str):
    if side == "lower":
        ga_resp = np.argmin(y_table, axis=-1)
        inner = np.min(y_table, axis=-1)
        th_pick = np.argmax(inner, axis=-1)
        value = np.max(inner, axis=-1)
        return value, th_pick, ga_resp
    th_resp = np.argmax(y_table, axis=-2)
    inner = np.max(y_table, axis=-2)
    ga_pick = np.argmin(inner, axis=-1)
    value = np.min(inner, axis=-1)
    return value, ga_pick, th_resp


def solve_value(spec: ProblemSpec, lattice: NoiseLattice, side: str = "lower",
                start=None, theta_grid: ControlGrid | None = None,
                gamma_grid: ControlGrid | None = None,
                node_budget: int = 2_000_000, dedup_decimals: int = 12,
                depth: int | None = None) -> ValueField:
    """Backward-solve the discrete game value field from ``start``.

    ``start`` defaults to (0, origin).  The forward pass enumerates the states
    reachable under every control pair and noise outcome, deduplicating per
    slice within ``dedup_decimals``; the backward pass fills values and the
    optimizing policies.  Deterministic: ties break to the lowest grid index.
    """
    if side not in ("lower", "upper"):
        raise ValueError("side must be 'lower' or 'upper'")
    check_step_contraction(lattice.dt, spec.bound, "solve_value")
    r, x0 = (0, np.zeros(spec.d)) if start is None else start
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).reshape(1, spec.d)
    th = theta_grid or spec.theta_grid
    ga = gamma_grid or spec.gamma_grid
    n_steps = lattice.time_grid.n_steps
    depth = (n_steps - r) if depth is None else depth
    if r + depth > n_steps:
        raise ValueError("horizon exceeds the time grid")

    fld = ValueField(
        side=side, spec=spec, lattice=lattice, theta_grid=th, gamma_grid=ga,
        start_index=r, root_state=x0[0],
        states=[_round_keys(x0, dedup_decimals)],
        hists=None, dedup_decimals=dedup_decimals,
        provenance=(spec.content_key(), _lattice_key(lattice)))
    if spec.uses_history():
        fld.hists = [np.zeros((1, len(spec.history_times), lattice.m))]

    # forward reachability with per-slice dedup
    total = 1
    times = lattice.time_grid.times
    for k in range(depth):
        hist_k = None if fld.hists is None else fld.hists[k]
        nxt, nxt_h, _ = _slice_step(spec, lattice, th.points, ga.points,
                                    fld.states[k], hist_k, times[r + k], r + k,
                                    dedup_decimals)
        total += nxt.shape[0]
        if total > node_budget:
            raise BudgetError(
                f"value DAG exceeds the node budget of {node_budget} at slice "
                f"{k + 1} ({total} nodes); the dynamics do not recombine at "
                f"this horizon -- reduce n_steps or raise node_budget")
        fld.states.append(nxt)
        if fld.hists is not None:
            fld.hists.append(nxt_h)
    fld.node_total = total

    # backward induction
    hist_K = None if fld.hists is None else fld.hists[depth]
    v = np.asarray(spec.terminal(fld.states[depth], hist_K), dtype=float)
    v = np.broadcast_to(v, (fld.states[depth].shape[0],)).copy()
    fld.values = [None] * (depth + 1)
    fld.policy_theta = [None] * depth
    fld.policy_gamma = [None] * depth
    fld.values[depth] = v
    for k in range(depth - 1, -1, -1):
        y_table = _one_step_tables(fld, k, fld.values[k + 1])
        value, pick, resp = _optimize(y_table, side)
        fld.values[k] = value
        fld.policy_theta[k] = pick if side == "lower" else resp
        fld.policy_gamma[k] = resp if side == "lower" else pick
    return fld


# ---------------------------------------------------------------------------
# Dynamic programming residuals
# ---------------------------------------------------------------------------

def dpp_residual(fld: ValueField, j: int, k: int, map_cap: int = 200_000,
                 spec: ProblemSpec | None = None,
                 lattice: NoiseLattice | None = None) -> float:
    """Max nodewise gap between V_j and the re-solved inner game over [j, k].

    The window is re-solved with V_k as terminal data; at every node the
    one-step subgame is evaluated by explicit enumeration of all response
    maps mu: theta-grid -> gamma-grid (their count permitting, windows of at
    most six steps), which verifies the stagewise strategy collapse rather
    than replaying the max-min recursion.  The discrete principle is an
    identity, so the residual is pure floating-point noise.
    """
    if not 0 <= j < k <= fld.depth:
        raise ValueError("need 0 <= j < k <= depth")
    if spec is not None and spec.content_key() != fld.provenance[0]:
        raise ValueError("provenance mismatch: value field solved on a "
                         "different problem")
    if lattice is not None and _lattice_key(lattice) != fld.provenance[1]:
        raise ValueError("provenance mismatch: value field solved on a "
                         "different lattice")
    n_th = fld.theta_grid.n_points
    n_ga = fld.gamma_grid.n_points
    n_maps = n_ga ** n_th
    enumerate_maps = (k - j) <= 6 and n_maps <= map_cap and fld.side == "lower"
    maps = None
    if enumerate_maps:
        maps = np.array(list(itertools.product(range(n_ga), repeat=n_th)),
                        dtype=np.int64)  # (n_maps, n_th)

    v = fld.values[k]
    for kk in range(k - 1, j - 1, -1):
        y_table = _one_step_tables(fld, kk, v)
        if enumerate_maps:
            v = _map_enumeration_value(y_table, maps)
        else:
            v, _, _ = _optimize(y_table, fld.side)
    return float(np.max(np.abs(v - fld.values[j])))


def _map_enumeration_value(y_table: np.ndarray, maps: np.ndarray,
                           chunk: int = 256) -> np.ndarray:
    """min over response maps of max over theta of y(theta, mu(theta))."""
    n, n_th, _ = y_table.shape
    out = np.empty(n)
    th_idx = np.arange(n_th)[None, :]  # broadcasts against (n_maps, n_th)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        block = y_table[lo:hi]  # (c, n_th, n_ga)
        picked = block[:, th_idx, maps]  # (c, n_maps, n_th)
        out[lo:hi] = picked.max(axis=2).min(axis=1)
    return out


def dpp_mc_check(fld: ValueField, n_paths: int = 50_000, seed: int = 11,
                 n_bootstrap: int = 100):
    """Monte Carlo policy evaluation of the greedy profile vs the field root.

    Simulates Gaussian paths under the nearest-node feedback policies and
    solves the payoff equation along them by regression; returns
    (mc_value, standard_error, lattice_value).  d = 1 only (the nearest-node
    lookup uses a sorted scan).
    """
    spec, lat = fld.spec, fld.lattice
    if spec.d != 1:
        raise ValueError("Monte Carlo policy check supports d = 1 only")
    from .grids import sample_paths

    ens = sample_paths(lat.time_grid, lat.m, n_paths, seed)
    th_pts, ga_pts = fld.theta_grid.points, fld.gamma_grid.points
    r = fld.start_index

    def lookup(k, x):
        pts = fld.states[k - r][:, 0]
        pos = np.clip(np.searchsorted(pts, x[:, 0]), 0, len(pts) - 1)
        left = np.clip(pos - 1, 0, len(pts) - 1)
        pick_left = np.abs(pts[left] - x[:, 0]) <= np.abs(pts[pos] - x[:, 0])
        return np.where(pick_left, left, pos)

    def theta_fb(k, x, hist):
        nodes = lookup(k, x)
        if fld.side == "lower":
            th_i = fld.policy_theta[k - r][nodes]
        else:
            g_i = fld.policy_gamma[k - r][nodes]
            th_i = fld.policy_theta[k - r][nodes, g_i]
        return th_pts[th_i]

    def gamma_fb(k, x, hist):
        nodes = lookup(k, x)
        if fld.side == "lower":
            th_i = fld.policy_theta[k - r][nodes]
            ga_i = fld.policy_gamma[k - r][nodes, th_i]
        else:
            ga_i = fld.policy_gamma[k - r][nodes]
        return ga_pts[ga_i]

    traj = euler_forward(spec, ens, (r, fld.root_state),
                         Control.feedback(theta_fb), Control.feedback(gamma_fb))
    sol = solve_lsmc(spec, traj, n_bootstrap=n_bootstrap, seed=seed + 1)
    return sol.value, sol.value_se, fld.root_value()


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------

def extract_epsilon_optimal(fld: ValueField) -> StrategyProfile:
    """Greedy profile from the stored policies, with its measured payoff gap.

    The on-profile payoff is re-solved over the DAG using only the chosen
    control pairs; on the exact lattice the greedy pair attains the stagewise
    optimum, so the reported epsilon is roundoff-sized.
    """
    depth = fld.depth
    payoff = [None] * (depth + 1)
    payoff[depth] = fld.values[depth].copy()
    eps = 0.0
    idx_cache = np.arange
    for k in range(depth - 1, -1, -1):
        y_table = _one_step_tables(fld, k, payoff[k + 1])
        n = y_table.shape[0]
        rows = idx_cache(n)
        if fld.side == "lower":
            th_i = fld.policy_theta[k]
            ga_i = fld.policy_gamma[k][rows, th_i]
        else:
            ga_i = fld.policy_gamma[k]
            th_i = fld.policy_theta[k][rows, ga_i]
        payoff[k] = y_table[rows, th_i, ga_i]
        eps = max(eps, float(np.max(np.abs(payoff[k] - fld.values[k]))))
    return StrategyProfile(field_ref=fld, epsilon=eps, payoff_values=payoff)


def deviation_test(fld: ValueField, n_nodes: int = 100, seed: int = 5,
                   tol: float = 1e-10) -> int:
    """Count profitable unilateral deviations at random nodes (contract: 0).

    Lower field: no theta deviation beats the recorded value when the
    minimizer answers with the stored response map; upper field mirrored.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    depth = fld.depth
    violations = 0
    for _ in range(n_nodes):
        k = int(rng.integers(0, depth))
        node = int(rng.integers(0, fld.states[k].shape[0]))
        y_table = _one_step_tables(fld, k, fld.values[k + 1])[node]
        v = fld.values[k][node]
        if fld.side == "lower":
            resp = fld.policy_gamma[k][node]
            attained = y_table[np.arange(fld.theta_grid.n_points), resp]
            if np.max(attained) > v + tol:
                violations += 1
        else:
            resp = fld.policy_theta[k][node]
            attained = y_table[resp, np.arange(fld.gamma_grid.n_points)]
            if np.min(attained) < v - tol:
                violations += 1
    return violations


# ---------------------------------------------------------------------------
# Probe-based regularity and stability
# ---------------------------------------------------------------------------

def value_on_probes(spec: ProblemSpec, lattice: NoiseLattice, slice_indices,
                    x_probes, side: str = "lower", node_budget: int = 2_000_000,
                    **kw) -> np.ndarray:
    """V(t_k, x) on a probe grid, one fresh DAG solve per probe point."""
    x_probes = np.atleast_2d(np.asarray(x_probes, dtype=float))
    out = np.empty((len(slice_indices), x_probes.shape[0]))
    for i, k in enumerate(slice_indices):
        for jx, x in enumerate(x_probes):
            f = solve_value(spec, lattice, side, start=(int(k), x),
                            node_budget=node_budget, **kw)
            out[i, jx] = f.root_value()
    return out


@dataclass
class RegularityReport:
    sup_value: float
    sup_bound: float
    sup_ok: bool
    spatial_quotient: float
    time_modulus: float  # max |V(t_k, x) - V(t_{k+1}, x)| / sqrt(dt)


def regularity_suite(spec: ProblemSpec, lattice: NoiseLattice, x_probes,
                     slice_indices=None, side: str = "lower",
                     node_budget: int = 2_000_000) -> RegularityReport:
    """Sup bound, spatial difference quotients and time modulus on probes.

    Values are re-solved from every probe initial state rather than read off
    one tree, so Lipschitz estimates carry no interpolation artifacts.
    """
    n_steps = lattice.time_grid.n_steps
    if slice_indices is None:
        slice_indices = sorted({0, n_steps // 2, max(n_steps - 2, 0)})
    vals = value_on_probes(spec, lattice, slice_indices, x_probes, side,
                           node_budget)
    x_probes = np.atleast_2d(np.asarray(x_probes, dtype=float))
    sup_value = float(np.max(np.abs(vals)))
    sup_bound = spec.bound * (lattice.time_grid.horizon + 1.0)
    quot = 0.0
    for a in range(x_probes.shape[0]):
        for b in range(a + 1, x_probes.shape[0]):
            dx = float(np.linalg.norm(x_probes[a] - x_probes[b]))
            if dx > 1e-12:
                quot = max(quot, float(np.max(np.abs(vals[:, a] - vals[:, b]))) / dx)
    tmod = 0.0
    sq = math.sqrt(lattice.dt)
    for i in range(len(slice_indices) - 1):
        if slice_indices[i + 1] == slice_indices[i] + 1:
            tmod = max(tmod, float(np.max(np.abs(vals[i + 1] - vals[i]))) / sq)
    return RegularityReport(sup_value=sup_value, sup_bound=sup_bound,
                            sup_ok=sup_value <= sup_bound * (1 + 1e-9),
                            spatial_quotient=quot, time_modulus=tmod)


@dataclass
class StabilityReport:
    eps: list
    drifts: list
    slope: float
    ratio_spread: float  # max/min of drift/eps, the measured linearity constant


def stability_suite(spec: ProblemSpec, lattice: NoiseLattice, eps_list,
                    drift_bump=None, driver_bump=None, x_probes=None,
                    side: str = "lower", tilde_bound: float = 1.0,
                    node_budget: int = 2_000_000) -> StabilityReport:
    """Value drift under coefficient perturbations of size eps.

    Perturbs drift and/or driver by eps times the supplied bounded bumps,
    re-solves the value on the probes, and fits the log-log slope of the
    sup-norm drift against eps (first-order stability gives slope one).
    """
    if drift_bump is None and driver_bump is None:
        raise ValueError("need at least one of drift_bump/driver_bump")
    x_probes = (np.zeros((1, spec.d)) if x_probes is None
                else np.atleast_2d(np.asarray(x_probes, dtype=float)))
    base = np.array([
        solve_value(spec, lattice, side, start=(0, x),
                    node_budget=node_budget).root_value()
        for x in x_probes])
    drifts = []
    for eps in eps_list:
        pspec = _perturbed_spec(spec, eps, drift_bump, driver_bump, tilde_bound)
        pert = np.array([
            solve_value(pspec, lattice, side, start=(0, x),
                        node_budget=node_budget).root_value()
            for x in x_probes])
        drifts.append(float(np.max(np.abs(pert - base))))
    eps_arr = np.asarray(list(eps_list), dtype=float)
    dr = np.asarray(drifts)
    good = dr > 1e-14
    slope = float("nan")
    if np.sum(good) >= 2:
        slope = float(np.polyfit(np.log(eps_arr[good]), np.log(dr[good]), 1)[0])
    ratios = dr[good] / eps_arr[good]
    spread = float(np.max(ratios) / np.min(ratios)) if ratios.size else 1.0
    return StabilityReport(eps=list(eps_list), drifts=drifts, slope=slope,
                           ratio_spread=spread)


def _perturbed_spec(spec, eps, drift_bump, driver_bump, tilde_bound):
    base_drift, base_driver = spec.drift, spec.driver

    def drift(t, x, th, ga, h):
        out = np.asarray(base_drift(t, x, th, ga, h))
        if drift_bump is not None:
            out = out + eps * np.asarray(drift_bump(t, x, th, ga, h))
        return out

    def driver(t, x, y, z, th, ga, h):
        out = np.asarray(base_driver(t, x, y, z, th, ga, h))
        if driver_bump is not None:
            out = out + eps * np.asarray(driver_bump(t, x, y, z, th, ga, h))
        return out

    from dataclasses import replace

    return replace(spec, drift=drift, driver=driver,
                   bound=spec.bound + eps * tilde_bound,
                   label=spec.label + f"+eps{eps:g}")


def value_gap(lower: ValueField, upper: ValueField):
    """(max of lower - upper, sup |lower - upper|) over the shared DAG.

    Both fields must be solved with identical parameters so the node sets
    coincide; the first number is nonpositive up to roundoff (minimax order
    survives the recursion), the second vanishes with dt when the pointwise
    Hamiltonians agree.
    """
    if lower.provenance != upper.provenance:
        raise ValueError("fields come from different problems or lattices")
    worst_order = -math.inf
    sup_gap = 0.0
    for vl, vu in zip(lower.values, upper.values):
        worst_order = max(worst_order, float(np.max(vl - vu)))
        sup_gap = max(sup_gap, float(np.max(np.abs(vl - vu))))
    return worst_order, sup_gap
