"""Problem specifications, coefficient-assumption validation, and smoothing tools.

A game problem is a bundle of vectorized coefficient callables

    drift      b(t, x, theta, gamma, hist)   -> (..., d)
    diffusion  sigma(t, x, theta, gamma, hist) -> (..., d, m)
    driver     f(t, x, y, z, theta, gamma, hist) -> (...)
    terminal   Phi(x, hist)                  -> (...)

where ``x`` is (..., d), ``theta``/``gamma`` are control points (..., p)/(..., q),
``z`` is (..., m) and ``hist`` is the finite noise history (..., N, m) -- the
Wiener values at the problem's partition times, truncated at the current time
-- or None for Markovian problems.  Callables must be pure (identical inputs
give identical outputs) and broadcast over leading dimensions; that purity is
the executable stand-in for measurability of random coefficients.

The smoothing tools implement the compactly supported bump kernel, the smooth
convex barrier obtained by convolving the shifted-norm hinge twice with the
bump, and kernel mollification of bounded continuous functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ControlGrid",
    "ProblemSpec",
    "MollifierConfig",
    "A1Report",
    "bump_kernel",
    "convex_barrier",
    "mollify",
    "validate_a1",
]


class ProblemError(ValueError):
    """Raised for ill-formed problem specifications."""


# ---------------------------------------------------------------------------
# Control grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlGrid:
    """Finite discretization of a compact control set."""

    points: np.ndarray  # (n_points, n_dims)
    label: str = "theta"

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ProblemError("control grid needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ProblemError("control grid points must be finite")
        if len(np.unique(np.round(pts, 14), axis=0)) != pts.shape[0]:
            raise ProblemError("control grid contains duplicate points")
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_dims(self) -> int:
        return self.points.shape[1]

    @classmethod
    def scalar(cls, values: Sequence[float], label: str = "theta") -> "ControlGrid":
        return cls(np.asarray(values, dtype=float).reshape(-1, 1), label)

    @classmethod
    def from_box(cls, lo, hi, points_per_axis: int, label: str = "theta") -> "ControlGrid":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        axes = [np.linspace(a, b, points_per_axis) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return cls(np.stack([g.ravel() for g in mesh], axis=-1), label)


# ---------------------------------------------------------------------------
# Problem specification
# ---------------------------------------------------------------------------

Coefficient = Callable[..., np.ndarray]


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients, control grids and the uniform bound/Lipschitz constant."""

    d: int
    m: int
    drift: Coefficient
    diffusion: Coefficient
    driver: Coefficient
    terminal: Coefficient
    bound: float  # uniform bound and Lipschitz constant, denoted L
    theta_grid: ControlGrid
    gamma_grid: ControlGrid
    randomness: str = "markovian"  # or "discrete-random"
    history_times: tuple = ()
    label: str = ""

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ProblemError("state and noise dimensions must be >= 1")
        if self.bound <= 0:
            raise ProblemError("bound constant must be positive")
        if self.randomness not in ("markovian", "discrete-random"):
            raise ProblemError(f"unknown randomness kind {self.randomness!r}")
        if self.randomness == "discrete-random" and not self.history_times:
            raise ProblemError("discrete-random problems need history_times")

    @property
    def L(self) -> float:
        return self.bound

    def content_key(self) -> str:
        """Stable identity string used for provenance hashes."""
        import hashlib

        parts = [
            self.label, str(self.d), str(self.m), f"{self.bound:.17g}",
            self.randomness, repr(tuple(self.history_times)),
            np.array2string(self.theta_grid.points, precision=17),
            np.array2string(self.gamma_grid.points, precision=17),
        ]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]

    def uses_history(self) -> bool:
        return self.randomness == "discrete-random"


@dataclass(frozen=True)
class MollifierConfig:
    """Smoothing radius and quadrature resolution for kernel convolutions."""

    delta: float
    quad_points: int = 32

    def __post_init__(self):
        if self.delta <= 0:
            raise ProblemError("mollifier radius delta must be positive")
        if self.quad_points < 4:
            raise ProblemError("need at least 4 quadrature points per axis")


# ---------------------------------------------------------------------------
# Bump kernel
# ---------------------------------------------------------------------------

_BUMP_NORM_CACHE: dict = {}


def _sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def _bump_normalizer(d: int) -> float:
    """1 / integral of exp(1/(|x|^2-1)) over the unit ball, via radial quadrature."""
    if d not in _BUMP_NORM_CACHE:
        nodes, weights = np.polynomial.legendre.leggauss(200)
        r = 0.5 * (nodes + 1.0)  # map to (0, 1)
        w = 0.5 * weights
        integrand = r ** (d - 1) * np.exp(1.0 / (r * r - 1.0))
        _BUMP_NORM_CACHE[d] = 1.0 / (_sphere_area(d) * float(integrand @ w))
    return _BUMP_NORM_CACHE[d]


def bump_kernel(x: np.ndarray) -> np.ndarray:
    """Smooth unit-mass kernel supported on the open unit ball.

    Returns c * exp(1/(|x|^2 - 1)) for |x| < 1 and 0 otherwise, with c the
    normalizing constant (computed once per dimension by quadrature).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim == 1:
        x = x[None, :]
        squeeze = True
    else:
        squeeze = False
    d = x.shape[-1]
    r2 = np.sum(x * x, axis=-1)
    out = np.zeros(r2.shape)
    inside = r2 < 1.0
    out[inside] = _bump_normalizer(d) * np.exp(1.0 / (r2[inside] - 1.0))
    return out[0] if squeeze else out


def _bump_raw(x: np.ndarray, d: int) -> np.ndarray:
    """Normalized kernel value on pre-shaped (..., d) input."""
    r2 = np.sum(x * x, axis=-1)
    out = np.zeros(r2.shape)
    inside = r2 < 1.0
    out[inside] = _bump_normalizer(d) * np.exp(1.0 / (r2[inside] - 1.0))
    return out


def _bump_grad_raw(x: np.ndarray, d: int) -> np.ndarray:
    r2 = np.sum(x * x, axis=-1)
    out = np.zeros(x.shape)
    inside = r2 < 1.0
    xi = x[inside]
    s = r2[inside] - 1.0
    rho = _bump_normalizer(d) * np.exp(1.0 / s)
    out[inside] = rho[..., None] * (-2.0 / (s * s))[..., None] * xi
    return out


def _bump_hess_raw(x: np.ndarray, d: int) -> np.ndarray:
    r2 = np.sum(x * x, axis=-1)
    out = np.zeros(x.shape + (d,))
    inside = r2 < 1.0
    xi = x[inside]
    s = r2[inside] - 1.0
    rho = _bump_normalizer(d) * np.exp(1.0 / s)
    gp = -1.0 / (s * s)         # derivative of 1/(s-1) pattern w.r.t. r^2
    gpp = 2.0 / (s ** 3)
    outer = xi[:, :, None] * xi[:, None, :]
    eye = np.eye(d)
    out[inside] = rho[:, None, None] * (
        4.0 * outer * (gp * gp + gpp)[:, None, None]
        + 2.0 * gp[:, None, None] * eye
    )
    return out


# ---------------------------------------------------------------------------
# Convex barrier
# ---------------------------------------------------------------------------

# The barrier is h ** bump ** bump with h(y) = max(|y| - 2, 0): convex, smooth,
# zero at the origin, and growing like |x| - 2.  We precompute the two-fold
# kernel k2 = bump*bump and its first two derivatives on a tensor quadrature
# grid over [-2, 2]^d once per (d, quad) pair; every barrier evaluation is
# then a single weighted sum of hinge values against that table.  Positivity
# of the table weights makes the quadrature barrier exactly convex.

_K2_CACHE: dict = {}


def _tensor_gauss(lo: float, hi: float, n: int, d: int):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    x1 = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    w1 = 0.5 * (hi - lo) * weights
    mesh = np.meshgrid(*([x1] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=-1)
    wmesh = np.meshgrid(*([w1] * d), indexing="ij")
    w = np.prod(np.stack([g.ravel() for g in wmesh], axis=-1), axis=-1)
    return pts, w


def _k2_table(d: int, quad: int):
    key = (d, quad)
    if key in _K2_CACHE:
        return _K2_CACHE[key]
    # outer nodes where k2 and derivatives are tabulated
    s_pts, s_w = _tensor_gauss(-2.0, 2.0, quad, d)
    # inner quadrature over the first kernel's support
    u_pts, u_w = _tensor_gauss(-1.0, 1.0, quad, d)
    rho_u = _bump_raw(u_pts, d) * u_w
    diff = s_pts[:, None, :] - u_pts[None, :, :]
    k2 = _bump_raw(diff, d) @ rho_u
    dk2 = np.einsum("sud,u->sd", _bump_grad_raw(diff, d), rho_u)
    d2k2 = np.einsum("sude,u->sde", _bump_hess_raw(diff, d), rho_u)
    _K2_CACHE[key] = (s_pts, s_w, k2, dk2, d2k2)
    return _K2_CACHE[key]


def _hinge(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.sqrt(np.sum(x * x, axis=-1)) - 2.0, 0.0)


def convex_barrier(x, quad_points: int = 32):
    """Smooth convex barrier with value, gradient and Hessian at ``x``.

    Properties relied on elsewhere: value 0 at the origin, positivity away
    from it, growth above |x| - 3, and uniformly bounded first and second
    derivatives (the measured bound plays the role of the derivative cap).
    Restricted to d <= 2; the quadrature table cost grows like quad^(2d).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    single = x.ndim == 1
    pts = x[None, :] if single else x
    d = pts.shape[-1]
    if d > 2:
        raise ProblemError("convex_barrier supports d <= 2 only")
    s_pts, s_w, k2, dk2, d2k2 = _k2_table(d, quad_points)
    h = _hinge(pts[:, None, :] - s_pts[None, :, :])  # (n, n_s)
    value = h @ (s_w * k2)
    grad = h @ (s_w[:, None] * dk2)
    hess = np.einsum("ns,sde->nde", h, s_w[:, None, None] * d2k2)
    if single:
        return float(value[0]), grad[0], hess[0]
    return value, grad, hess


# ---------------------------------------------------------------------------
# Mollification
# ---------------------------------------------------------------------------

def mollify(phi: Callable[[np.ndarray], np.ndarray], delta: float,
            d: int = 1, quad_points: int = 32) -> Callable[[np.ndarray], np.ndarray]:
    """Kernel-smooth a bounded continuous function at radius ``delta``.

    Returns x -> sum_u w_u phi(x - delta*u) over a tensor quadrature of the
    unit-ball kernel, with the discrete weights renormalized to unit mass so
    the smoothing is exactly linear, monotone, sup-norm non-expansive and
    constant-preserving.  d <= 2.
    """
    if delta <= 0:
        raise ProblemError("delta must be positive")
    if d > 2:
        raise ProblemError("mollify supports d <= 2 only")
    u_pts, u_w = _tensor_gauss(-1.0, 1.0, quad_points, d)
    w = _bump_raw(u_pts, d) * u_w
    w = w / w.sum()
    keep = w > 0
    u_pts, w = u_pts[keep], w[keep]

    def smoothed(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        single = x.ndim == 1
        pts = x[None, :] if single else x
        shifted = pts[:, None, :] - delta * u_pts[None, :, :]
        vals = np.asarray(phi(shifted.reshape(-1, d))).reshape(pts.shape[0], -1)
        out = vals @ w
        return float(out[0]) if single else out

    return smoothed


def kernel_mass(d: int = 1, quad_points: int = 32) -> float:
    """Quadrature of the bump kernel over its support (exact value: 1)."""
    u_pts, u_w = _tensor_gauss(-1.0, 1.0, quad_points, d)
    return float(_bump_raw(u_pts, d) @ u_w)


# ---------------------------------------------------------------------------
# Coefficient-assumption validation
# ---------------------------------------------------------------------------

@dataclass
class A1Report:
    """Probe-based check of the uniform bound and Lipschitz conditions."""

    passed: bool
    max_bound: float
    max_quotient: float
    bound_witness: tuple | None = None
    quotient_witness: tuple | None = None
    n_probes: int = 0

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"A1 {status}: sup|coeff| = {self.max_bound:.4g}, "
                f"max Lipschitz quotient = {self.max_quotient:.4g} over "
                f"{self.n_probes} probes")


def _history_sample(rng, spec, n):
    if not spec.uses_history():
        return None
    n_times = len(spec.history_times)
    return rng.normal(0.0, 1.0, size=(n, n_times, spec.m))


def validate_a1(spec: ProblemSpec, probes: int = 200, seed: int = 0,
                lipschitz_slack: float = 1.01) -> A1Report:
    """Statistically check the bound and Lipschitz conditions on random probes.

    The check passes iff the measured sup of |(b, sigma)| + |f| (and of |Phi|)
    stays within the declared constant and every sampled difference quotient
    stays within ``L * lipschitz_slack``.  Violations are reported with the
    witnessing probe, never raised.
    """
    if probes < 1:
        raise ProblemError("probes must be >= 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    L = spec.bound
    t_hi = 1.0 if not spec.history_times else max(spec.history_times)

    # mixture of probe scales so unbounded growth in any argument is caught
    scales = np.concatenate([
        np.full(probes - probes // 2, 1.0),
        np.full(probes // 4, 5.0),
        np.full(probes - (probes - probes // 2) - probes // 4, 25.0),
    ])
    n = len(scales)
    t = rng.uniform(0.0, t_hi, n)
    x = rng.normal(0.0, 1.0, (n, spec.d)) * scales[:, None]
    y = rng.normal(0.0, 1.0, n) * scales
    z = rng.normal(0.0, 1.0, (n, spec.m)) * scales[:, None]
    th = spec.theta_grid.points[rng.integers(0, spec.theta_grid.n_points, n)]
    ga = spec.gamma_grid.points[rng.integers(0, spec.gamma_grid.n_points, n)]
    hist = _history_sample(rng, spec, n)

    # paired probes for difference quotients
    x2 = x + rng.normal(0.0, 1.0, x.shape) * scales[:, None]
    y2 = y + rng.normal(0.0, 1.0, n) * scales
    z2 = z + rng.normal(0.0, 1.0, z.shape) * scales[:, None]
    th2 = spec.theta_grid.points[rng.integers(0, spec.theta_grid.n_points, n)]
    ga2 = spec.gamma_grid.points[rng.integers(0, spec.gamma_grid.n_points, n)]

    max_bound = -np.inf
    max_quot = 0.0
    bound_wit = None
    quot_wit = None
    for i in range(n):
        hi = None if hist is None else hist[i]
        args1 = (float(t[i]), x[i], th[i], ga[i], hi)
        b1 = np.asarray(spec.drift(*args1))
        s1 = np.asarray(spec.diffusion(*args1))
        f1 = float(spec.driver(float(t[i]), x[i], float(y[i]), z[i], th[i], ga[i], hi))
        p1 = float(spec.terminal(x[i], hi))
        size = math.sqrt(float(np.sum(b1 * b1) + np.sum(s1 * s1))) + abs(f1)
        cand = max(size, abs(p1))
        if cand > max_bound:
            max_bound = cand
            bound_wit = (float(t[i]), x[i].copy(), float(y[i]))

        args2 = (float(t[i]), x2[i], th2[i], ga2[i], hi)
        b2 = np.asarray(spec.drift(*args2))
        s2 = np.asarray(spec.diffusion(*args2))
        f2 = float(spec.driver(float(t[i]), x2[i], float(y2[i]), z2[i], th2[i], ga2[i], hi))
        p2 = float(spec.terminal(x2[i], hi))
        denom = (np.linalg.norm(x[i] - x2[i]) + abs(y[i] - y2[i])
                 + np.linalg.norm(z[i] - z2[i]) + np.linalg.norm(th[i] - th2[i])
                 + np.linalg.norm(ga[i] - ga2[i]))
        if denom > 1e-12:
            num = (math.sqrt(float(np.sum((b1 - b2) ** 2) + np.sum((s1 - s2) ** 2)))
                   + abs(f1 - f2))
            q = num / denom
            dx = np.linalg.norm(x[i] - x2[i])
            if dx > 1e-12:
                q = max(q, abs(p1 - p2) / dx)
            if q > max_quot:
                max_quot = q
                quot_wit = (float(t[i]), x[i].copy(), x2[i].copy(),
                            float(y[i]), float(y2[i]))

    passed = (max_bound <= L + 1e-12) and (max_quot <= L * lipschitz_slack)
    return A1Report(passed=passed, max_bound=float(max_bound),
                    max_quotient=float(max_quot), bound_witness=bound_wit,
                    quotient_witness=quot_wit, n_probes=n)
