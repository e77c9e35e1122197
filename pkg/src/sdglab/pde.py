"""Deterministic finite-difference oracle for the semilinear value equation.

For Markovian problems with x- and control-free diffusion the value solves a
semilinear parabolic equation whose nonlinearity is the pointwise optimized
Hamiltonian.  The oracle marches it backward with an explicit monotone
scheme: central second differences, first differences upwinded per control
pair by the drift sign, and the driver's gradient argument folded through the
same Hamiltonian composition the game solver uses (B = 0, z = 0, so the
driver sees sigma' Du).  Monotonicity plus the CFL bound give a discrete
maximum principle, verified at every step.

This is an oracle, not a production solver: d <= 2, diagonal second-order
part, uniform boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import hamiltonian_table
from .problems import ControlGrid, ProblemSpec

__all__ = [
    "PdeGrid",
    "PdeSolution",
    "solve_hjbi_fd",
    "compare_game_vs_pde",
    "sub_super_gap",
    "OracleError",
]


class OracleError(RuntimeError):
    """Raised on CFL violations or unsupported coefficient structure."""


@dataclass(frozen=True)
class PdeGrid:
    """Uniform space-time box for the finite-difference oracle."""

    lo: tuple
    hi: tuple
    n_x: int  # points per axis
    n_t: int
    horizon: float
    t0: float = 0.0
    boundary: str = "clamped"  # or "one-sided"

    def __post_init__(self):
        if self.boundary not in ("clamped", "one-sided"):
            raise OracleError(f"unknown boundary {self.boundary!r}")
        if len(self.lo) != len(self.hi):
            raise OracleError("box corners disagree in dimension")
        if len(self.lo) > 2:
            raise OracleError("the oracle supports d <= 2 only")
        if self.n_x < 5 or self.n_t < 1:
            raise OracleError("need n_x >= 5 and n_t >= 1")

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def dt(self) -> float:
        return (self.horizon - self.t0) / self.n_t

    def axes(self):
        return [np.linspace(self.lo[i], self.hi[i], self.n_x)
                for i in range(self.d)]

    @property
    def dx(self) -> np.ndarray:
        return np.array([(self.hi[i] - self.lo[i]) / (self.n_x - 1)
                         for i in range(self.d)])

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    @classmethod
    def with_cfl(cls, spec: ProblemSpec, lo, hi, n_x: int, horizon: float,
                 t0: float = 0.0, safety: float = 0.9,
                 align_steps: int | None = None,
                 boundary: str = "clamped") -> "PdeGrid":
        """Pick n_t from the stability bound (optionally grid-aligned)."""
        lo = tuple(np.atleast_1d(np.asarray(lo, dtype=float)))
        hi = tuple(np.atleast_1d(np.asarray(hi, dtype=float)))
        probe = cls(lo, hi, n_x, 1, horizon, t0, boundary)
        diag, bmax = _coefficient_scales(spec, probe)
        rate = float(np.sum(2.0 * diag / probe.dx ** 2)
                     + np.sum(bmax / probe.dx) + spec.bound)
        n_t = max(1, int(math.ceil((horizon - t0) * rate / safety)))
        if align_steps:
            n_t = int(math.ceil(n_t / align_steps)) * align_steps
        return cls(lo, hi, n_x, n_t, horizon, t0, boundary)


@dataclass
class PdeSolution:
    """Backward solution field with scheme diagnostics."""

    grid: PdeGrid
    spec_key: str
    side: str
    u: np.ndarray = field(repr=False)  # (n_t+1, n_x[, n_x])
    times: np.ndarray = field(repr=False)
    max_principle_violations: int = 0
    cfl_factor: float = 0.0

    def interp(self, t: float, x) -> float:
        """Multilinear interpolation of the field at (t, x); t snaps to the
        nearest stored slice (the time step is CFL-fine)."""
        k = int(round((t - self.grid.t0) / self.grid.dt))
        k = min(max(k, 0), self.grid.n_t)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        axes = self.grid.axes()
        if self.grid.d == 1:
            return float(np.interp(x[0], axes[0], self.u[k]))
        ax, ay = axes
        i = int(np.clip(np.searchsorted(ax, x[0]) - 1, 0, len(ax) - 2))
        j = int(np.clip(np.searchsorted(ay, x[1]) - 1, 0, len(ay) - 2))
        fx = (x[0] - ax[i]) / (ax[i + 1] - ax[i])
        fy = (x[1] - ay[j]) / (ay[j + 1] - ay[j])
        u = self.u[k]
        return float((1 - fx) * (1 - fy) * u[i, j] + fx * (1 - fy) * u[i + 1, j]
                     + (1 - fx) * fy * u[i, j + 1] + fx * fy * u[i + 1, j + 1])


def _coefficient_scales(spec: ProblemSpec, grid: PdeGrid):
    """Diffusion diagonal and per-axis drift bounds; refuses structure the
    monotone oracle cannot handle (x- or control-dependent sigma, off-
    diagonal second-order part)."""
    pts = grid.points()
    sample = pts[:: max(1, pts.shape[0] // 64)]
    th_pts = spec.theta_grid.points
    ga_pts = spec.gamma_grid.points
    tsam = np.linspace(grid.t0, grid.horizon, 3)
    sig_ref = None
    bmax = np.zeros(grid.d)
    for t in tsam:
        for th in th_pts:
            for ga in ga_pts:
                sig = np.asarray(spec.diffusion(t, sample, th, ga, None))
                sig = np.broadcast_to(sig, (sample.shape[0], spec.d, spec.m))
                if float(np.max(np.abs(sig - sig[:1]))) > 1e-10:
                    raise OracleError(
                        "oracle requires an x-free diffusion on the box")
                if sig_ref is None:
                    sig_ref = sig[0]
                elif float(np.max(np.abs(sig[0] - sig_ref))) > 1e-10:
                    raise OracleError(
                        "oracle requires a control-free diffusion")
                b = np.asarray(spec.drift(t, sample, th, ga, None))
                b = np.broadcast_to(b, (sample.shape[0], spec.d))
                bmax = np.maximum(bmax, np.max(np.abs(b), axis=0))
    ssT = sig_ref @ sig_ref.T
    off = ssT - np.diag(np.diag(ssT))
    if float(np.max(np.abs(off))) > 1e-12:
        raise OracleError("oracle requires a diagonal second-order part")
    return 0.5 * np.diag(ssT), bmax


def _one_sided_hessian(u, dx2, axis):
    A = np.zeros_like(u)
    sl = [slice(None)] * u.ndim
    inner, up, dn = sl.copy(), sl.copy(), sl.copy()
    inner[axis], up[axis], dn[axis] = slice(1, -1), slice(2, None), slice(0, -2)
    A[tuple(inner)] = (u[tuple(up)] - 2 * u[tuple(inner)] + u[tuple(dn)]) / dx2
    return A


def _shift(u, axis, by):
    out = np.roll(u, -by, axis=axis)
    sl = [slice(None)] * u.ndim
    if by > 0:
        sl[axis] = slice(-by, None)
        out[tuple(sl)] = u[tuple(sl)]
    else:
        sl[axis] = slice(None, -by)
        out[tuple(sl)] = u[tuple(sl)]
    return out


def _apply_step(spec, grid, u_next, t, th_pts, ga_pts, side):
    """One explicit monotone backward step; returns the updated interior
    (boundary handled per the grid's policy by the caller)."""
    d = grid.d
    dx = grid.dx
    shape = u_next.shape
    pts = grid.points()
    flat_next = u_next.ravel()

    # diffusion term from central differences (zero on the boundary ring)
    hess_diag = np.stack(
        [_one_sided_hessian(u_next, dx[i] ** 2, i).ravel() for i in range(d)],
        axis=-1)
    A = np.zeros((pts.shape[0], d, d))
    for i in range(d):
        A[:, i, i] = hess_diag[:, i]

    fwd = [( _shift(u_next, i, 1) - u_next).ravel() / dx[i] for i in range(d)]
    bwd = [(u_next - _shift(u_next, i, -1)).ravel() / dx[i] for i in range(d)]

    n_th, n_ga = th_pts.shape[0], ga_pts.shape[0]
    table = np.empty((pts.shape[0], n_th, n_ga))
    Bmat = np.zeros((pts.shape[0], spec.m, d))
    zvec = np.zeros((pts.shape[0], spec.m))
    for a in range(n_th):
        for c in range(n_ga):
            th, ga = th_pts[a], ga_pts[c]
            b = np.broadcast_to(np.asarray(spec.drift(t, pts, th, ga, None)),
                                (pts.shape[0], d))
            p = np.empty((pts.shape[0], d))
            for i in range(d):
                p[:, i] = np.where(b[:, i] >= 0.0, fwd[i], bwd[i])
            table[:, a, c] = hamiltonian_table(
                spec, t, pts, A, Bmat, p, flat_next, zvec,
                th[None, :], ga[None, :])[:, 0, 0]
    if side == "lower":
        ham = np.max(np.min(table, axis=2), axis=1)
    else:
        ham = np.min(np.max(table, axis=2), axis=1)
    return (flat_next + grid.dt * ham).reshape(shape)


def _boundary_mask(shape):
    mask = np.zeros(shape, dtype=bool)
    for axis in range(len(shape)):
        sl = [slice(None)] * len(shape)
        sl[axis] = 0
        mask[tuple(sl)] = True
        sl[axis] = -1
        mask[tuple(sl)] = True
    return mask


def solve_hjbi_fd(spec: ProblemSpec, grid: PdeGrid, side: str = "lower",
                  theta_grid: ControlGrid | None = None,
                  gamma_grid: ControlGrid | None = None) -> PdeSolution:
    """Explicit monotone backward solve of the optimized semilinear equation.

    Raises on CFL violation or coefficient structure outside the oracle's
    scope; verifies the discrete maximum principle at every step.
    """
    if spec.uses_history():
        raise OracleError("the oracle handles Markovian problems only")
    th = (theta_grid or spec.theta_grid).points
    ga = (gamma_grid or spec.gamma_grid).points
    diag, bmax = _coefficient_scales(spec, grid)
    dx = grid.dx
    cfl = grid.dt * (float(np.sum(2.0 * diag / dx ** 2))
                     + float(np.sum(bmax / dx)) + spec.bound)
    if cfl > 1.0 + 1e-9:
        raise OracleError(
            f"CFL factor {cfl:.3f} > 1; raise n_t to at least "
            f"{int(math.ceil(grid.n_t * cfl))}")

    shape = (grid.n_x,) * grid.d
    pts = grid.points()
    u = np.asarray(spec.terminal(pts, None), dtype=float).reshape(shape)
    terminal_flat = u.ravel().copy()
    times = np.linspace(grid.t0, grid.horizon, grid.n_t + 1)
    out = np.empty((grid.n_t + 1,) + shape)
    out[grid.n_t] = u
    bmask = _boundary_mask(shape)
    violations = 0
    fcap = spec.bound  # |driver| <= L under the bound assumption
    for k in range(grid.n_t - 1, -1, -1):
        u_new = _apply_step(spec, grid, out[k + 1], times[k + 1], th, ga, side)
        if grid.boundary == "clamped":
            u_new.ravel()[bmask.ravel()] = terminal_flat[bmask.ravel()]
        lo_cap = float(np.min(out[k + 1])) - grid.dt * fcap - 1e-10
        hi_cap = float(np.max(out[k + 1])) + grid.dt * fcap + 1e-10
        inner = u_new.ravel()[~bmask.ravel()]
        violations += int(np.sum((inner < lo_cap) | (inner > hi_cap)))
        out[k] = u_new
    if violations:
        raise OracleError(
            f"discrete maximum principle violated at {violations} nodes; "
            f"the scheme is not monotone at this resolution")
    return PdeSolution(grid=grid, spec_key=spec.content_key(), side=side,
                       u=out, times=times, max_principle_violations=violations,
                       cfl_factor=float(cfl))


# ---------------------------------------------------------------------------
# Cross-validation against the game value
# ---------------------------------------------------------------------------

def compare_game_vs_pde(value_field, sol: PdeSolution, slice_indices,
                        boundary_margin: float | None = None) -> dict:
    """Sup discrepancy between a lattice value field and the oracle field.

    Probes every DAG state of the chosen slices lying at least
    ``boundary_margin`` (default 2 dx) inside the box; valid for Markovian
    problems, where slice-k node values equal the value function there.
    """
    grid = sol.grid
    if value_field.spec.content_key() != sol.spec_key:
        raise ValueError("value field and oracle solve different problems")
    margin = (2.0 * float(np.max(grid.dx)) if boundary_margin is None
              else boundary_margin)
    lo = np.asarray(grid.lo) + margin
    hi = np.asarray(grid.hi) - margin
    times = value_field.lattice.time_grid.times
    r = value_field.start_index
    sup = 0.0
    count = 0
    for k in slice_indices:
        states = value_field.states[k]
        vals = value_field.values[k]
        inside = np.all((states >= lo) & (states <= hi), axis=1)
        for x, v in zip(states[inside], vals[inside]):
            sup = max(sup, abs(float(v) - sol.interp(times[r + k], x)))
            count += 1
    if count == 0:
        raise ValueError("no probe states inside the comparison box")
    return {"sup_discrepancy": sup, "n_probes": count}


def residual_field(spec: ProblemSpec, sol: PdeSolution,
                   theta_grid: ControlGrid | None = None,
                   gamma_grid: ControlGrid | None = None) -> np.ndarray:
    """Per-step interior residual u_k - (u_{k+1} + dt * H(u_{k+1})).

    Zero (to roundoff) for fields produced by the solver; subsolutions are
    nonpositive and supersolutions nonnegative up to tolerance.
    """
    grid = sol.grid
    th = (theta_grid or spec.theta_grid).points
    ga = (gamma_grid or spec.gamma_grid).points
    bmask = _boundary_mask(sol.u.shape[1:]).ravel()
    res = np.zeros((grid.n_t,) + sol.u.shape[1:])
    for k in range(grid.n_t):
        step = _apply_step(spec, grid, sol.u[k + 1], sol.times[k + 1], th, ga,
                           sol.side)
        r = (sol.u[k] - step).ravel()
        r[bmask] = 0.0
        res[k] = r.reshape(sol.u.shape[1:])
    return res


def sub_super_gap(spec: ProblemSpec, sub: PdeSolution, sup: PdeSolution,
                  residual_tol: float = 1e-9) -> dict:
    """Minimum of (super - sub) over the grid, after verifying both sides.

    Preconditions: the sub field's interior residuals stay below
    ``residual_tol`` and the super field's above ``-residual_tol``; on
    failure the offending field and worst location are reported.  The gap
    then stays above -(accumulated residual tolerance) times the horizon
    scale for a monotone scheme.
    """
    if sub.grid != sup.grid:
        raise ValueError("fields must share one grid")
    r_sub = residual_field(spec, sub)
    r_sup = residual_field(spec, sup)
    worst_sub = float(np.max(r_sub))
    worst_sup = float(np.min(r_sup))
    if worst_sub > residual_tol:
        loc = np.unravel_index(int(np.argmax(r_sub)), r_sub.shape)
        raise ValueError(
            f"claimed subsolution has residual {worst_sub:.3e} > "
            f"{residual_tol:.1e} at slice/node {loc}")
    if worst_sup < -residual_tol:
        loc = np.unravel_index(int(np.argmin(r_sup)), r_sup.shape)
        raise ValueError(
            f"claimed supersolution has residual {worst_sup:.3e} < "
            f"-{residual_tol:.1e} at slice/node {loc}")
    gap = float(np.min(sup.u - sub.u))
    return {"min_gap": gap, "sub_residual_max": worst_sub,
            "sup_residual_min": worst_sup,
            "floor": -(2.0 * residual_tol) * sub.grid.n_t}
