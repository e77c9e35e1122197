"""Pointwise Hamiltonians over finite control grids, and test-field drivers.

For a control pair the integrand is

    tr( 1/2 sigma sigma' A + sigma B ) + b' p + f(t, x, y, z + sigma' p, th, ga)

evaluated with the problem coefficients; the lower Hamiltonian takes
sup over theta of inf over gamma of that table, the upper Hamiltonian the
mirrored order.  All optimizations are exact enumerations over the grids and
ties break to the lowest grid index, so results are deterministic.

The test-field driver shifts the problem driver by a smooth field: given a
field phi with supplied time derivative, spatial gradient/Hessian and (for
random fields) noise-derivative surrogates, the shifted driver is

    F = d_t phi + tr( 1/2 sigma sigma' D^2 phi + sigma D(d_w phi) )
        + b' D phi + f(t, x, y + phi, z + sigma' D phi + d_w phi, th, ga),

with envelopes F1(theta) = inf_gamma F and F0 = sup_theta F1 realized by
deterministic argmins over the grids.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .problems import ControlGrid, ProblemSpec

__all__ = [
    "HamiltonianPoint",
    "TestField",
    "pair_hamiltonian",
    "hamiltonian_table",
    "lower_hamiltonian",
    "upper_hamiltonian",
    "isaacs_check",
    "field_shifted_driver",
    "driver_envelopes",
    "driver_lipschitz_modulus",
]


@dataclass(frozen=True)
class HamiltonianPoint:
    """Arguments of the Hamiltonian at one point: (t, x, A, B, p, y, z)."""

    t: float
    x: np.ndarray  # (d,)
    A: np.ndarray  # (d, d), symmetric
    B: np.ndarray  # (m, d)
    p: np.ndarray  # (d,)
    y: float
    z: np.ndarray  # (m,)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.shape[0] != A.shape[1] or np.max(np.abs(A - A.T)) > 1e-12:
            raise ValueError("second-order coefficient A must be symmetric")


def _coeff_args(x, theta, gamma, hist):
    """Expand a point batch and control grids to a broadcastable pair table."""
    x = np.asarray(x, dtype=float)
    batch = x.shape[:-1]
    X = x[..., None, None, :]
    TH = np.asarray(theta, dtype=float)[:, None, :]
    GA = np.asarray(gamma, dtype=float)[None, :, :]
    H = None if hist is None else np.asarray(hist, dtype=float)[..., None, None, :, :]
    return batch, X, TH, GA, H


def pair_hamiltonian(point: HamiltonianPoint, theta, gamma, spec: ProblemSpec,
                     hist=None) -> float:
    """Hamiltonian integrand at a single point for one control pair."""
    table = hamiltonian_table(
        spec, point.t, point.x[None], point.A[None], point.B[None],
        point.p[None], np.asarray([point.y]), point.z[None],
        np.atleast_2d(theta), np.atleast_2d(gamma),
        None if hist is None else np.asarray(hist)[None])
    return float(table[0, 0, 0])


def hamiltonian_table(spec: ProblemSpec, t: float, x, A, B, p, y, z,
                      theta_pts, gamma_pts, hist=None) -> np.ndarray:
    """Integrand values over all control pairs: (..., n_theta, n_gamma).

    ``x`` (..., d), ``A`` (..., d, d), ``B`` (..., m, d), ``p`` (..., d),
    ``y`` (...), ``z`` (..., m); control points (n, c).
    """
    x = np.asarray(x, dtype=float)
    A = np.asarray(A, dtype=float)
    Bf = np.asarray(B, dtype=float)
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    batch, X, TH, GA, H = _coeff_args(x, theta_pts, gamma_pts, hist)
    n_th, n_ga = TH.shape[0], GA.shape[1]

    b = np.asarray(spec.drift(t, X, TH, GA, H))
    sig = np.asarray(spec.diffusion(t, X, TH, GA, H))
    b = np.broadcast_to(b, batch + (n_th, n_ga, spec.d))
    sig = np.broadcast_to(sig, batch + (n_th, n_ga, spec.d, spec.m))

    A_e = A[..., None, None, :, :]
    B_e = Bf[..., None, None, :, :]
    p_e = p[..., None, None, :]
    y_e = np.broadcast_to(y[..., None, None], batch + (n_th, n_ga))
    z_e = z[..., None, None, :]

    # tr(1/2 sigma sigma' A): sum_{i,j} (sigma sigma')_{ij} A_{ji}; A symmetric
    ssT = np.einsum("...im,...jm->...ij", sig, sig)
    quad = 0.5 * np.einsum("...ij,...ij->...", ssT, A_e)
    cross = np.einsum("...dm,...md->...", sig, B_e)
    linear = np.einsum("...d,...d->...", b, p_e)
    z_shift = z_e + np.einsum("...dm,...d->...m", sig, p_e)
    fval = np.asarray(spec.driver(t, X, y_e, z_shift, TH, GA, H))
    fval = np.broadcast_to(fval, batch + (n_th, n_ga))
    return quad + cross + linear + fval


def lower_hamiltonian(spec: ProblemSpec, t, x, A, B, p, y, z,
                      theta_grid: ControlGrid | None = None,
                      gamma_grid: ControlGrid | None = None, hist=None):
    """sup over theta of inf over gamma: (value, argmax theta, per-theta argmin gamma).

    Batched over leading axes; indices index the grids, first-best on ties.
    """
    th = (theta_grid or spec.theta_grid).points
    ga = (gamma_grid or spec.gamma_grid).points
    table = hamiltonian_table(spec, t, x, A, B, p, y, z, th, ga, hist)
    gamma_response = np.argmin(table, axis=-1)
    inner = np.min(table, axis=-1)
    theta_star = np.argmax(inner, axis=-1)
    value = np.max(inner, axis=-1)
    return value, theta_star, gamma_response


def upper_hamiltonian(spec: ProblemSpec, t, x, A, B, p, y, z,
                      theta_grid: ControlGrid | None = None,
                      gamma_grid: ControlGrid | None = None, hist=None):
    """inf over gamma of sup over theta: (value, argmin gamma, per-gamma argmax theta)."""
    th = (theta_grid or spec.theta_grid).points
    ga = (gamma_grid or spec.gamma_grid).points
    table = hamiltonian_table(spec, t, x, A, B, p, y, z, th, ga, hist)
    theta_response = np.argmax(table, axis=-2)
    inner = np.max(table, axis=-2)
    gamma_star = np.argmin(inner, axis=-1)
    value = np.min(inner, axis=-1)
    return value, gamma_star, theta_response


@dataclass
class IsaacsReport:
    max_gap: float
    worst_point: HamiltonianPoint | None
    holds: bool
    tolerance: float


def isaacs_check(spec: ProblemSpec, points: list[HamiltonianPoint],
                 theta_grid: ControlGrid | None = None,
                 gamma_grid: ControlGrid | None = None,
                 tolerance: float = 1e-9) -> IsaacsReport:
    """Max of (upper - lower) Hamiltonian over the sample; gap <= tol means
    the saddle condition holds on the sample (the gap is never below -1e-12
    because the minimax inequality is exact for a shared finite table)."""
    max_gap = -np.inf
    worst = None
    for pt in points:
        lo, _, _ = lower_hamiltonian(spec, pt.t, pt.x[None], pt.A[None], pt.B[None],
                                     pt.p[None], np.asarray([pt.y]), pt.z[None],
                                     theta_grid, gamma_grid)
        hi, _, _ = upper_hamiltonian(spec, pt.t, pt.x[None], pt.A[None], pt.B[None],
                                     pt.p[None], np.asarray([pt.y]), pt.z[None],
                                     theta_grid, gamma_grid)
        gap = float(hi[0] - lo[0])
        if gap > max_gap:
            max_gap, worst = gap, pt
    return IsaacsReport(max_gap=max_gap, worst_point=worst,
                        holds=max_gap <= tolerance, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Smooth test fields and the shifted driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestField:
    """A smooth field phi(t, x) with analytically supplied derivatives.

    ``time_derivative`` stands in for the field's pathwise time derivative and
    ``noise_derivative`` (an m-vector field, with its spatial gradient) for
    the pathwise noise derivative; for deterministic fields the former is the
    ordinary time derivative and the latter vanishes, which is the default.
    All callables are pure, bounded, and vectorized over (..., d) states.
    """

    value: Callable  # (t, x) -> (...)
    time_derivative: Callable  # (t, x) -> (...)
    gradient: Callable  # (t, x) -> (..., d)
    hessian: Callable  # (t, x) -> (..., d, d)
    noise_derivative: Callable | None = None  # (t, x) -> (..., m)
    noise_derivative_gradient: Callable | None = None  # (t, x) -> (..., m, d)

    def noise_term(self, t, x, m: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.noise_derivative is None:
            return np.zeros(x.shape[:-1] + (m,))
        return np.asarray(self.noise_derivative(t, x), dtype=float)

    def noise_grad_term(self, t, x, m: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        if self.noise_derivative_gradient is None:
            return np.zeros(x.shape[:-1] + (m, d))
        return np.asarray(self.noise_derivative_gradient(t, x), dtype=float)

    def check_derivatives(self, d: int, probes: int = 20, seed: int = 0,
                          step: float = 1e-5, tol: float = 1e-6) -> float:
        """Max mismatch of supplied gradient/Hessian vs central differences."""
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        worst = 0.0
        for _ in range(probes):
            t = float(rng.uniform(0.0, 1.0))
            x = rng.normal(0.0, 1.0, d)
            g = np.asarray(self.gradient(t, x))
            hss = np.asarray(self.hessian(t, x))
            for i in range(d):
                e = np.zeros(d)
                e[i] = step
                fd = (self.value(t, x + e) - self.value(t, x - e)) / (2 * step)
                worst = max(worst, abs(float(fd) - float(g[i])))
                gd = (np.asarray(self.gradient(t, x + e))
                      - np.asarray(self.gradient(t, x - e))) / (2 * step)
                worst = max(worst, float(np.max(np.abs(gd - hss[i]))))
        if worst > tol:
            raise ValueError(
                f"test field derivatives disagree with finite differences "
                f"by {worst:.3e} (tolerance {tol:.1e})")
        return worst


def field_shifted_driver(field: TestField, spec: ProblemSpec, t: float, x, y, z,
                         theta, gamma, hist=None) -> np.ndarray:
    """Driver shifted by the test field, for a fixed control pair.

    Vectorized over nodes: ``x`` (..., d), ``y`` (...), ``z`` (..., m);
    ``theta``/``gamma`` single control points or broadcastable arrays.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    ga = np.atleast_1d(np.asarray(gamma, dtype=float))
    if th.ndim == 1:
        th = np.broadcast_to(th, x.shape[:-1] + th.shape)
    if ga.ndim == 1:
        ga = np.broadcast_to(ga, x.shape[:-1] + ga.shape)

    phi = np.asarray(field.value(t, x), dtype=float)
    dphi_t = np.asarray(field.time_derivative(t, x), dtype=float)
    grad = np.asarray(field.gradient(t, x), dtype=float)
    hess = np.asarray(field.hessian(t, x), dtype=float)
    dnoise = field.noise_term(t, x, spec.m)
    dnoise_grad = field.noise_grad_term(t, x, spec.m)

    b = np.broadcast_to(np.asarray(spec.drift(t, x, th, ga, hist)),
                        x.shape[:-1] + (spec.d,))
    sig = np.broadcast_to(np.asarray(spec.diffusion(t, x, th, ga, hist)),
                          x.shape[:-1] + (spec.d, spec.m))
    ssT = np.einsum("...im,...jm->...ij", sig, sig)
    quad = 0.5 * np.einsum("...ij,...ij->...", ssT, hess)
    cross = np.einsum("...dm,...md->...", sig, dnoise_grad)
    linear = np.einsum("...d,...d->...", b, grad)
    z_shift = z + np.einsum("...dm,...d->...m", sig, grad) + dnoise
    fval = np.asarray(spec.driver(t, x, y + phi, z_shift, th, ga, hist))
    return dphi_t + quad + cross + linear + np.broadcast_to(fval, x.shape[:-1])


def driver_envelopes(field: TestField, spec: ProblemSpec, t: float, x, y, z,
                     theta_grid: ControlGrid | None = None,
                     gamma_grid: ControlGrid | None = None, hist=None):
    """Optimized shifted drivers: (sup-inf value, per-theta inf values, gamma picks).

    The per-theta gamma index realizes the measurable selection discretely:
    identical inputs always select the same (lowest-index) minimizer.
    """
    th_pts = (theta_grid or spec.theta_grid).points
    ga_pts = (gamma_grid or spec.gamma_grid).points
    x = np.asarray(x, dtype=float)
    batch = x.shape[:-1]
    table = np.empty(batch + (len(th_pts), len(ga_pts)))
    for a, th in enumerate(th_pts):
        for c, ga in enumerate(ga_pts):
            table[..., a, c] = field_shifted_driver(field, spec, t, x, y, z,
                                                    th, ga, hist)
    gamma_pick = np.argmin(table, axis=-1)
    f1 = np.min(table, axis=-1)
    f0 = np.max(f1, axis=-1)
    return f0, f1, gamma_pick


def driver_lipschitz_modulus(field: TestField, spec: ProblemSpec, t: float,
                             probes: int = 100, seed: int = 0,
                             scale: float = 3.0) -> float:
    """Probe-based spatial Lipschitz modulus of the shifted driver at time t.

    Measured as the max difference quotient over random probe pairs, random
    (y, z) and all control pairs; attached by callers to rate estimates.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    worst = 0.0
    for _ in range(probes):
        x1 = rng.normal(0.0, scale, spec.d)
        x2 = x1 + rng.normal(0.0, 0.5, spec.d)
        y = float(rng.normal(0.0, 1.0))
        z = rng.normal(0.0, 1.0, spec.m)
        for th in spec.theta_grid.points:
            for ga in spec.gamma_grid.points:
                f1 = float(field_shifted_driver(field, spec, t, x1, y, z, th, ga))
                f2 = float(field_shifted_driver(field, spec, t, x2, y, z, th, ga))
                dx = float(np.linalg.norm(x1 - x2))
                if dx > 1e-12:
                    worst = max(worst, abs(f1 - f2) / dx)
    return worst
