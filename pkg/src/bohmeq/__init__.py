"""Bohmian trajectories and numerical tests of equivariant density functionals."""

__version__ = "0.1.0"

from .ensemble import Ensemble, Trajectory
from .flow import BohmianFlow, FlowConfig, VelocityField, advance_trajectory, evolve_ensemble, velocity_at, velocity_field
from .functionals import (
    CdfTransport,
    DensityFunctional,
    Equilibrium,
    GradientMix,
    PowerLaw,
    TransportMeasure,
    cdf_F,
    cdf_transport_density,
    estimate_h,
    eval_density,
    parse_functional,
)
from .grid import (
    DensityGrid,
    Grid,
    TrivialWaveFunctionError,
    WaveFunction,
    density_of,
    l2_norm_sq,
    normalize,
    sample_from_density,
    spectral_derivative,
)
from .lab import (
    EquivarianceReport,
    check_equivariance,
    constant_of_motion_F,
    constant_of_motion_G,
    continuity_residual,
    ergodic_time_average,
    ks_distance,
    l1_distance,
)
from .propagator import (
    EigenSystem,
    PotentialSpec,
    SuperpositionState,
    build_hamiltonian,
    propagate_eigenbasis,
    propagate_free,
    propagate_split_step,
    solve_eigenbasis,
)
from .records import EvolutionRecord

__all__ = [name for name in dir() if not name.startswith("_")]
