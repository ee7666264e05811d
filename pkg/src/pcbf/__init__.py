"""Safety filtering with continuously parametrized control barrier functions.

The package couples a plant state x with a barrier parameter k and filters a
reference input through a small QP so that the pair (x, k) never leaves the
parametrized safe set. Submodules:

- qp: dense active-set QP solver, spectral cutting planes, Jacobi eigensolver
- barriers: dynamics, barrier families, parameter-validity constraints
- filter: constraint-row assembly and the per-step safety filters
- sim: fixed-step closed-loop simulator and trace handling
- scenarios: rover, adaptive cruise control, and linear benchmark setups
- validation: gradient/chain/soundness checkers used by the CLI and tests
- plots: deterministic SVG rendering of traces
- cli: command-line entry point
- teleop: websocket teleoperation service
"""

__version__ = "0.1.0"

from .qp import (
    CutBudgetExceeded,
    CutSet,
    LmiConstraint,
    NonSymmetricError,
    QpSolution,
    QpStatus,
    QuadraticProgram,
    min_eigenpair,
    solve_qp,
    solve_qp_with_lmi,
)

__all__ = [
    "CutBudgetExceeded",
    "CutSet",
    "LmiConstraint",
    "NonSymmetricError",
    "QpSolution",
    "QpStatus",
    "QuadraticProgram",
    "min_eigenpair",
    "solve_qp",
    "solve_qp_with_lmi",
    "__version__",
]
