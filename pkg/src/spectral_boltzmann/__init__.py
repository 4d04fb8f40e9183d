"""Deterministic spectral solver for the linearized non-cutoff Boltzmann equation.

Modules:

* velocity:   velocity grid, Maxwellian, macro projection, weights, moments
* collision:  kernel, assembled operators, Gamma, coercivity spectrum
* transport:  Fourier-mode evolution, k-grids, decay envelopes, trajectories
* norms:      mixed norms, energy functionals, decay-rate fits
* verify:     inequality checks, macro moment residuals, energy ledger
* config, pipeline, cli: experiment configuration and orchestration

The collision loops come from a compiled extension when it is importable
and from a NumPy implementation otherwise (see `kernels.BACKEND`).
"""

from .collision import (CoercivityReport, GammaTensor, KernelSpec, OperatorMatrix, assemble_all,
                        assemble_dnorm_gram, assemble_L, coercivity_spectrum, gamma_eval,
                        kernel_eval, kernel_residuals, q_collision, q_collision_direct)
from .kernels import BACKEND
from .norms import (InterpolationSchedule, NormTag, fit_decay_rate, functional_suite,
                    mixed_norm, young_constant)
from .transport import (GammaHat, KGrid, SpectralState, Stepper, Trajectory,
                        radial_decay_envelope, simulate)
from .velocity import (MacroProjector, SphereQuadrature, VelocityGrid, WeightSpec, maxwellian,
                       project_P, sqrt_maxwellian)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CoercivityReport", "GammaHat", "GammaTensor", "InterpolationSchedule", "KGrid",
    "KernelSpec", "MacroProjector", "NormTag", "OperatorMatrix", "SpectralState",
    "SphereQuadrature", "Stepper", "Trajectory", "VelocityGrid", "WeightSpec", "assemble_L",
    "assemble_all", "assemble_dnorm_gram", "coercivity_spectrum", "fit_decay_rate",
    "functional_suite", "gamma_eval", "kernel_eval", "kernel_residuals", "maxwellian",
    "mixed_norm", "project_P", "q_collision", "q_collision_direct", "radial_decay_envelope",
    "simulate", "sqrt_maxwellian", "young_constant",
]
