"""Poisson-driven compartmental epidemic models.

Deterministic NSFD integration of the ODE limit, exact (SSA) and tau-leaping
stochastic simulation, and the Freidlin-Wentzell exit cost by backward dynamic
programming.
"""

__version__ = "0.1.0"

from .errors import (BlowupError, BoundaryXError, DomainError, EpiLdpError,
                     NonHyperbolicError, NotBistableError, RepairExhaustedError,
                     SingularSystemError)
from .models import (CompartmentalModel, Domain, Equilibrium, LinearConstraint,
                     PolynomialRate, ScaledModel, Trajectory,
                     basic_reproduction_number, builtin_model, check_boundary_rates,
                     default_seed_grid, drift, find_equilibria, load_model,
                     model_from_dict, rate_jacobian, sis, siv, siv_from_iv,
                     siv_reduced, siv_to_iv)
from .nsfd import (DenominatorFunction, MetzlerForm, NSFDConfig, builtin_metzler,
                   characteristic_boundary, classify_attractor, compute_Q,
                   explicit_integrate, metzler_sis, metzler_siv, nsfd_integrate,
                   nsfd_step, sis_exact)
from .lagrangian import (LagrangianEvaluator, ell_tilde, lagrangian_batch,
                         lagrangian_general, lagrangian_sis,
                         quasipotential_1d_oracle, sis_lagrangian_ext)
from .dp import (ExitResult, Grid1D, RotatedGrid2D, ValueFunctionGrid,
                 bellman_backward, build_grid_sis, build_grid_siv, compute_vbar,
                 extract_trajectory, terminal_cost)
from .simulate import (EnsembleSpec, EnsembleSummary, RngStream, SimStats,
                       TauLeapConfig, ensemble_run, ssa_direct, tau_leap_explicit,
                       tau_leap_modified, tau_leap_variant_rates, tau_select)
