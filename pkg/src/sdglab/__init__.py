"""Numerical laboratory for zero-sum stochastic differential games.

Two players steer a diffusion through drift and volatility while a backward
equation aggregates running and terminal rewards; this package computes the
resulting lower and upper value fields on exact noise lattices, verifies
their dynamic programming structure, the sublinear-expectation calculus that
frames them, and cross-validates the values against a deterministic
finite-difference oracle for the associated semilinear equation.
"""

__version__ = "0.1.0"
SCHEMA_VERSION = 1

from .grids import TimeGrid, NoiseLattice, PathEnsemble, build_lattice, sample_paths
from .problems import (
    ControlGrid,
    ProblemSpec,
    MollifierConfig,
    bump_kernel,
    convex_barrier,
    mollify,
    validate_a1,
)
from .sde import (
    Control,
    StateTrajectory,
    ControlledTree,
    euler_forward,
    lattice_forward,
    check_flow_property,
    moment_estimates,
)
from .bsde import (
    BsdeSolution,
    SemigroupQuery,
    solve_lattice,
    solve_lsmc,
    semigroup_apply,
    payoff_value,
    compare_bsde,
    freezing_gap,
)
from .sublinear import (
    SublinearQuery,
    sublinear_eval,
    sublinear_eval_tree,
    closed_form_measurable,
    tilt_expectation,
    domination_suite,
)
from .hamiltonian import (
    HamiltonianPoint,
    TestField,
    pair_hamiltonian,
    lower_hamiltonian,
    upper_hamiltonian,
    isaacs_check,
    field_shifted_driver,
    driver_envelopes,
)

__all__ = [name for name in dir() if not name.startswith("_")]
