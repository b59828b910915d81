"""Activated random walk: site-wise stabilization, chance counting and
critical-density estimation."""

__version__ = "0.1.0"

from .kernel import (InvalidDimension, InvalidKernel, JumpKernel, Params, ResourceError, Volume,
                     ball, green_function, make_ssrw_kernel, resolve_kernel, single_particle_q)
from .randomness import InstructionStream, derive_seed, instruction
from .engine import (SLEEPING, Configuration, IllegalToppling, Mode, NonterminationSuspected,
                     OdometerMap, StabilizationRecord, occupation_probability_pgf, stabilize,
                     strong_via_weak, topple)
from .oracle import ModelError, Quantity, exact_quantity, exact_stab_distribution
from .procedures import (carpet_many, carpet_procedure, escape_bounds, gamblers_ruin_escape,
                         hole_statistics, holes_many)
from .estimators import (BudgetFailureRate, EstimatorUnstable, InitialLaw, estimate_rho_c,
                         lambda_sweep, mass_conservation_check, occupation_curve)
