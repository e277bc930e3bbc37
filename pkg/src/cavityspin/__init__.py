"""cavityspin: inertial motion of a rigid body with a fluid-filled cavity.

A conservative finite-volume simulator, written in the body frame, for a box
cavity filled with an isentropic compressible viscous fluid, coupled
monolithically to the rigid body through its total angular momentum; plus a
steady rigid-rotation solver and a diagnostics suite that certifies mass and
angular-momentum conservation, the energy inequality, and long-time
convergence toward steady rotation.
"""

from .core import (
    BodySpec,
    CavityGrid,
    CoupledState,
    FluidField,
    PressureLaw,
    RegularizationSpec,
    ViscositySpec,
    constraint_residuals,
    density_relative_entropy,
    dpressure,
    first_moment,
    fluid_inertia,
    pressure,
    pressure_potential,
    skew,
    sound_speed,
    stress,
    total_inertia,
)
from .diagnostics import (
    DiagnosticsSample,
    OrientationState,
    Reference,
    advance_orientation,
    coupled_energy,
    omega_limit_detect,
    relative_entropy_total,
    renorm_residual,
    restrict_reference,
    torque_residual,
    total_energy,
)
from .dynamics import (
    RunCounters,
    StepControl,
    Tendency,
    Workspace,
    cfl_dt,
    dissipation_rate,
    make_state,
    recover_kinematics,
    relative_velocity,
    simulate,
    spatial_residual,
    step,
    wall_torque,
)
from .errors import (
    CavitySpinError,
    CertificationError,
    CheckpointError,
    ConfigError,
    ConvergenceError,
    DomainError,
    InfeasibleProfileError,
    InvariantViolation,
    NumericsError,
    PositivityError,
)
from .steady import SteadyState, SteadyResidualReport, eig3_sym, solve_steady, steady_profile, steady_residual

__version__ = "0.1.0"
