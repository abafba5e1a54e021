"""Matrix-free variational data assimilation with truncated Gauss-Newton.

Strong- and weak-constraint four-dimensional variational estimation on
matrix-free linear operators: primal, dual, and saddle-point formulations
of the inner quadratic subproblems, Krylov solvers with spectral recycling,
limited-memory and block preconditioners, and a twin-experiment driver.
"""

from .driver import (ExperimentConfig, TgnConfig, TwinExperiment, emit_report,
                     oracle_run, run_twin, tgn_run, verify_model)
from .krylov import (BreakdownError, SolveReport, SolverConfig, cgls, gmres,
                     lanczos_ritz, minres, pcg, rpcg)
from .models import (LinearAdvection, Lorenz96, ModelDivergenceError,
                     PointSelection, QuadraticPoint, taylor_test)
from .operators import (CovarianceModel, DimensionMismatchError,
                        FunctionOperator, IdentityOperator, MatrixOperator,
                        Operator, SpdOperator, TimeCoupling,
                        diagonal_covariance, isotropic_covariance,
                        materialize_dense)
from .precond import (Ftilde, build_lmp, build_qn_lmp, build_ritz_lmp,
                      build_spectral_lmp, choose_theta, first_level_transform,
                      ftilde_preconditioner, make_ftilde)
from .problem import (AssemblySystem, AssimilationSetup, InnerSubproblem,
                      Observation, assemble_augmented, assemble_dual,
                      assemble_normal, cost, gradient, linearize)
from .saddle import (BlockPreconditioner, SchurApprox,
                     block_diagonal_preconditioner,
                     block_triangular_preconditioner,
                     constraint_preconditioner, safeguarded_inner_solve,
                     solve_saddle)

__version__ = "0.1.0"
