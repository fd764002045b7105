"""Monte Carlo toolkit for recursive-utility control problems.

Forward Euler paths, regression BSDE solvers, first- and second-order adjoints,
spike-variation order studies and maximum-principle checks.
"""

__version__ = "0.1.0"

from .adjoint import AdjointProcesses, solve_adjoints, solve_constrained_adjoints
from .benchmarks import BENCHMARKS, get_benchmark
from .bsde import BsdeSolution, solve_bsde
from .maxprinciple import (
    ConstraintMultipliers,
    MPReport,
    check_constrained_mp,
    check_convex_corollary,
    check_mp,
    constrained_hamiltonian,
    hamiltonian,
)
from .model import ModelSpec, SpikeConfig, validate_derivatives
from .paths import TimeGrid, TrajectoryEnsemble, generate_noise, simulate_forward
from .regression import RegressionBasis
from .variation import OrderReport, run_order_study

__all__ = [
    "AdjointProcesses", "BENCHMARKS", "BsdeSolution", "ConstraintMultipliers", "MPReport", "ModelSpec",
    "OrderReport", "RegressionBasis", "SpikeConfig", "TimeGrid", "TrajectoryEnsemble", "check_constrained_mp",
    "check_convex_corollary", "check_mp", "constrained_hamiltonian", "generate_noise", "get_benchmark",
    "hamiltonian", "run_order_study", "simulate_forward", "solve_adjoints", "solve_bsde",
    "solve_constrained_adjoints", "validate_derivatives",
]
