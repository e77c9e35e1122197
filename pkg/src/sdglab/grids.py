"""Time grids, recombining noise lattices, and Monte Carlo path ensembles.

These three structures stand in for the filtered probability space that the
continuous theory works on.  The lattice carries a discrete noise whose
one-step mean and covariance match the Wiener increments *exactly*, so every
conditional expectation taken on it is an exact weighted sum; the path
ensemble is the usual Gaussian Monte Carlo companion.

Adaptedness convention: any per-path quantity at step k may depend only on
increments dW[:, :k]; any per-node quantity on the lattice is indexed by the
node (equivalently, by the noise history up to its slice).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeGrid",
    "NoiseLattice",
    "PathEnsemble",
    "build_lattice",
    "sample_paths",
]

# Paths are generated in fixed-size blocks with per-block Philox streams, so
# the ensemble is a pure function of (seed, shape) no matter how the blocks
# are scheduled.
_PATH_BLOCK = 16384


class GridError(ValueError):
    """Raised for inconsistent grid/lattice construction arguments."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [t0, horizon] with the final point pinned exactly."""

    t0: float
    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise GridError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.t0 < 0:
            raise GridError(f"t0 must be >= 0, got {self.t0}")
        if not self.horizon > self.t0:
            raise GridError(
                f"horizon must exceed t0, got t0={self.t0}, horizon={self.horizon}"
            )

    @property
    def dt(self) -> float:
        return (self.horizon - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        # linspace pins both endpoints, avoiding accumulation error at T
        return np.linspace(self.t0, self.horizon, self.n_steps + 1)

    def time(self, k: int) -> float:
        return float(self.times[k])

    @property
    def span(self) -> float:
        return self.horizon - self.t0


@dataclass(frozen=True)
class NoiseLattice:
    """Recombining discrete-noise approximation of an m-dimensional Wiener process.

    ``values[o]`` is the joint increment vector of outcome ``o`` over one step
    and ``probs[o]`` its probability; the same outcome table applies to every
    step because the time grid is uniform.  Per-coordinate positions after k
    steps recombine, so slice-k node counts grow polynomially in k.
    """

    time_grid: TimeGrid
    m: int
    branching: int
    values: np.ndarray = field(repr=False)  # (n_outcomes, m)
    probs: np.ndarray = field(repr=False)  # (n_outcomes,)

    @property
    def n_outcomes(self) -> int:
        return self.values.shape[0]

    @property
    def dt(self) -> float:
        return self.time_grid.dt

    # -- recombining slice structure -------------------------------------

    def axis_size(self, k: int) -> int:
        """Distinct per-coordinate positions after k steps."""
        return k + 1 if self.branching == 2 else 2 * k + 1

    def slice_node_count(self, k: int) -> int:
        return self.axis_size(k) ** self.m

    def slice_positions(self, k: int) -> np.ndarray:
        """Cumulative-noise value of every recombining node at slice k, (n_k, m)."""
        if self.branching == 2:
            axis = (2.0 * np.arange(k + 1) - k) * math.sqrt(self.dt)
        else:
            axis = (np.arange(2 * k + 1) - k) * math.sqrt(3.0 * self.dt)
        grids = np.meshgrid(*([axis] * self.m), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def slice_probabilities(self, k: int) -> np.ndarray:
        """Exact node probabilities at slice k by repeated convolution."""
        if self.branching == 2:
            axis_step = np.array([0.5, 0.5])
        else:
            axis_step = np.array([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0])
        axis = np.array([1.0])
        for _ in range(k):
            axis = np.convolve(axis, axis_step)
        out = axis
        for _ in range(self.m - 1):
            out = np.multiply.outer(out, axis)
        return out.ravel()

    def child_offsets(self) -> np.ndarray:
        """Per-coordinate index shift of each outcome on the recombining slices.

        Outcome ``o`` moves a node with per-axis index ``i`` at slice k to
        per-axis index ``i + child_offsets()[o]`` at slice k+1, for every k.
        """
        if self.branching == 2:
            per_axis = {-1: 0, 1: 1}
            step = math.sqrt(self.dt)
        else:
            per_axis = {-1: 0, 0: 1, 1: 2}
            step = math.sqrt(3.0 * self.dt)
        offs = np.empty((self.n_outcomes, self.m), dtype=np.int64)
        for o in range(self.n_outcomes):
            for c in range(self.m):
                key = int(round(self.values[o, c] / step))
                offs[o, c] = per_axis[key]
        return offs


def build_lattice(time_grid: TimeGrid, m: int, branching: int = 2) -> NoiseLattice:
    """Construct the symmetric two-point (default) or trinomial noise lattice.

    Two-point per coordinate: increments +/- sqrt(dt) with probability 1/2.
    Trinomial per coordinate: (-sqrt(3 dt), 0, +sqrt(3 dt)) with weights
    (1/6, 2/3, 1/6), matching the Wiener mean, variance and fourth moment.
    Coordinates are independent; joint outcomes are the cartesian product.
    """
    if branching not in (2, 3):
        raise GridError(f"branching must be 2 or 3, got {branching}")
    if m < 1:
        raise GridError(f"Wiener dimension m must be >= 1, got {m}")
    dt = time_grid.dt
    if branching == 2:
        axis_vals = [-math.sqrt(dt), math.sqrt(dt)]
        axis_probs = [0.5, 0.5]
    else:
        axis_vals = [-math.sqrt(3.0 * dt), 0.0, math.sqrt(3.0 * dt)]
        axis_probs = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]
    values = np.array(list(itertools.product(axis_vals, repeat=m)))
    probs = np.array(
        [math.prod(p) for p in itertools.product(axis_probs, repeat=m)]
    )
    return NoiseLattice(time_grid=time_grid, m=m, branching=branching,
                        values=values, probs=probs)


@dataclass(frozen=True)
class PathEnsemble:
    """Gaussian increments dW (n_paths, n_steps, m) and their cumulative sums W.

    W has n_steps+1 slices with W[:, 0] = 0 exactly; it is always the
    cumulative sum of dW, never regenerated independently.
    """

    time_grid: TimeGrid
    m: int
    n_paths: int
    seed: int
    dW: np.ndarray = field(repr=False)
    W: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return self.time_grid.dt


def sample_paths(time_grid: TimeGrid, m: int, n_paths: int, seed: int) -> PathEnsemble:
    """Draw i.i.d. Gaussian(0, dt) increments, deterministically from the seed.

    Generation uses the counter-based Philox engine, one stream per block of
    ``16384`` paths keyed by ``SeedSequence(entropy=seed, spawn_key=(block,))``,
    so the array is bit-reproducible and independent of any parallel schedule.
    """
    if n_paths < 1:
        raise GridError(f"n_paths must be >= 1, got {n_paths}")
    if m < 1:
        raise GridError(f"Wiener dimension m must be >= 1, got {m}")
    n_steps = time_grid.n_steps
    scale = math.sqrt(time_grid.dt)
    dW = np.empty((n_paths, n_steps, m))
    for block, start in enumerate(range(0, n_paths, _PATH_BLOCK)):
        stop = min(start + _PATH_BLOCK, n_paths)
        ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(block,))
        gen = np.random.Generator(np.random.Philox(ss))
        dW[start:stop] = gen.normal(0.0, scale, size=(stop - start, n_steps, m))
    W = np.zeros((n_paths, n_steps + 1, m))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    return PathEnsemble(time_grid=time_grid, m=m, n_paths=n_paths, seed=int(seed),
                        dW=dW, W=W)
