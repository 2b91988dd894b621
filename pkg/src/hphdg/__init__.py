"""hp-adaptive hybridized and standard discontinuous Galerkin solvers for 2D steady flow."""
from .adapt import (AdaptationConfig, AdaptationPlan, apply_plan, decide_hp, mark_dorfler,
                    smoothness_sensor, smoothness_sensors)
from .adjoint import ErrorEstimate, estimate_error, solve_adjoint
from .config import RunConfig, load_config, parse_config
from .dg import DG
from .hdg import HDG
from .krylov import BlockILU, LinearSolverConfig, LinearSolverError, solve_linear
from .mesh import Mesh, MeshError, load_mesh, naca_ogrid, refine, square_mesh, write_native
from .physics import (AdmissibilityError, ConfigError, EulerModel, GasModel, NavierStokesModel,
                      Problem, ScalarModel, Stabilization, TargetFunctional, make_model)
from .solver import ContinuationConfig, NonConvergenceError, cfl_schedule, nonlinear_solve
from .space import DegreeMap

__version__ = "0.1.0"
