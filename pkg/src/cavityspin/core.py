"""Constitutive laws, cavity geometry, inertia tensors, and state containers.

Everything here is pure value data plus pure functions; all integrals over the
cavity are midpoint-rule sums over cell centers, which is second-order
consistent with the finite-volume scheme in :mod:`cavityspin.dynamics`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DomainError, InvariantViolation

__all__ = [
    "CavityGrid",
    "BodySpec",
    "PressureLaw",
    "ViscositySpec",
    "RegularizationSpec",
    "FluidField",
    "CoupledState",
    "skew",
    "pressure",
    "dpressure",
    "sound_speed",
    "stress",
    "stress_power",
    "fluid_inertia",
    "first_moment",
    "total_inertia",
    "pressure_potential",
    "density_relative_entropy",
    "fluid_momentum",
    "fluid_angular_momentum",
    "constraint_residuals",
]

_SYM_TOL = 1e-12


def _tuple3(x, cast, name):
    t = tuple(cast(v) for v in x)
    if len(t) != 3:
        raise DomainError(f"{name} must have exactly 3 entries, got {len(t)}")
    return t


@dataclass(frozen=True)
class CavityGrid:
    """Axis-aligned box cavity on a structured grid of cell centers.

    The box has side lengths ``extents``, ``counts`` cells per axis, and its
    center sits at ``offset`` relative to the body's mass center (the origin
    of the body frame).  Cell ``(i, j, k)`` is centered at
    ``offset + ((i + 1/2) h - L/2, ...)`` with ``h = extents / counts``.
    """

    extents: tuple[float, float, float]
    counts: tuple[int, int, int]
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "extents", _tuple3(self.extents, float, "extents"))
        object.__setattr__(self, "counts", _tuple3(self.counts, int, "counts"))
        object.__setattr__(self, "offset", _tuple3(self.offset, float, "offset"))
        if any(n < 2 for n in self.counts):
            raise DomainError(f"cell counts must be >= 2 per axis, got {self.counts}")
        if any(not (L > 0.0) for L in self.extents):
            raise DomainError(f"extents must be positive, got {self.extents}")
        if any(not np.isfinite(v) for v in self.offset):
            raise DomainError(f"offset must be finite, got {self.offset}")

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(L / n for L, n in zip(self.extents, self.counts))

    @property
    def min_spacing(self) -> float:
        return min(self.spacing)

    @property
    def cell_volume(self) -> float:
        h = self.spacing
        return h[0] * h[1] * h[2]

    @property
    def volume(self) -> float:
        L = self.extents
        return L[0] * L[1] * L[2]

    @property
    def ncells(self) -> int:
        n = self.counts
        return n[0] * n[1] * n[2]

    def axis_centers(self, axis: int) -> np.ndarray:
        """Cell-center coordinates along one axis (length ``counts[axis]``)."""
        L, n, x0 = self.extents[axis], self.counts[axis], self.offset[axis]
        h = L / n
        return x0 + (np.arange(n) + 0.5) * h - 0.5 * L

    @cached_property
    def centers(self) -> np.ndarray:
        """Cell-center coordinates, shape ``(*counts, 3)``."""
        ax = [self.axis_centers(d) for d in range(3)]
        out = np.empty(self.counts + (3,))
        out[..., 0] = ax[0][:, None, None]
        out[..., 1] = ax[1][None, :, None]
        out[..., 2] = ax[2][None, None, :]
        return out


@dataclass(frozen=True, eq=False)
class BodySpec:
    """Rigid body: mass, inertia tensor about the mass center, and its cavity.

    The body enters the dynamics only through ``mass`` and ``inertia``; its
    shape and density field are never discretized.
    """

    mass: float
    inertia: np.ndarray
    cavity: CavityGrid

    def __post_init__(self):
        if not (self.mass > 0.0) or not np.isfinite(self.mass):
            raise DomainError(f"body mass must be positive and finite, got {self.mass}")
        ic = np.asarray(self.inertia, dtype=float)
        if ic.shape != (3, 3) or not np.all(np.isfinite(ic)):
            raise DomainError("body inertia must be a finite 3x3 tensor")
        scale = np.linalg.norm(ic)
        if np.linalg.norm(ic - ic.T) > _SYM_TOL * max(scale, 1e-300):
            raise DomainError("body inertia tensor must be symmetric to round-off")
        ic = 0.5 * (ic + ic.T)
        evals = np.linalg.eigvalsh(ic)
        if evals[0] <= 0.0:
            raise DomainError(
                f"body inertia tensor must be positive definite; eigenvalues {evals}"
            )
        lo, mid, hi = evals
        if hi > lo + mid + _SYM_TOL * scale:
            # Principal moments of any rigid mass distribution satisfy the
            # triangle inequality; violating it only merits a warning because
            # the dynamics stay well-posed either way.
            warnings.warn(
                "body inertia principal moments violate the triangle inequality "
                f"({hi:.6g} > {lo:.6g} + {mid:.6g}); not realizable by a mass distribution",
                stacklevel=2,
            )
        ic.setflags(write=False)
        object.__setattr__(self, "inertia", ic)


@dataclass(frozen=True)
class PressureLaw:
    """Isentropic equation of state p(rho) = a * rho**gamma."""

    a: float
    gamma: float

    def __post_init__(self):
        if not (self.a > 0.0) or not np.isfinite(self.a):
            raise DomainError(f"pressure stiffness a must be positive, got {self.a}")
        if not (self.gamma > 1.0) or not np.isfinite(self.gamma):
            raise DomainError(f"adiabatic exponent gamma must exceed 1, got {self.gamma}")

    @property
    def outside_weak_class(self) -> bool:
        """True when gamma <= 3/2, below the exponent range whose long-run
        certificates this package is designed around."""
        return self.gamma <= 1.5


@dataclass(frozen=True)
class ViscositySpec:
    """Newtonian viscosities: shear ``mu`` > 0 and bulk coefficient ``lam`` >= 0."""

    mu: float
    lam: float = 0.0

    def __post_init__(self):
        if not (self.mu > 0.0) or not np.isfinite(self.mu):
            raise DomainError(f"shear viscosity mu must be positive, got {self.mu}")
        if self.lam < 0.0 or not np.isfinite(self.lam):
            raise DomainError(f"bulk coefficient lam must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class RegularizationSpec:
    """Artificial density diffusion ``d`` and artificial pressure ``b * rho**beta``.

    Both default to zero (the physical model).  They exist so the two
    regularized limits d -> 0 and b -> 0 can be run as convergence studies.
    """

    d: float = 0.0
    b: float = 0.0
    beta: float = 8.0

    def __post_init__(self):
        if self.d < 0.0 or not np.isfinite(self.d):
            raise DomainError(f"artificial viscosity d must be >= 0, got {self.d}")
        if self.b < 0.0 or not np.isfinite(self.b):
            raise DomainError(f"artificial pressure coefficient b must be >= 0, got {self.b}")
        if not np.isfinite(self.beta):
            raise DomainError("artificial exponent beta must be finite")

    def validate_with(self, law: PressureLaw) -> None:
        """When b > 0 the artificial exponent must dominate: beta > max(4, gamma)."""
        if self.b > 0.0 and not (self.beta > max(4.0, law.gamma)):
            raise DomainError(
                f"artificial exponent beta={self.beta} must exceed max(4, gamma={law.gamma}) "
                "when b > 0"
            )


@dataclass(eq=False)
class FluidField:
    """Cell-centered density and momentum density (rho * u) on the cavity grid."""

    rho: np.ndarray
    q: np.ndarray

    def validate(self, grid: CavityGrid) -> None:
        n = grid.counts
        if self.rho.shape != n:
            raise DomainError(f"rho has shape {self.rho.shape}, expected {n}")
        if self.q.shape != n + (3,):
            raise DomainError(f"q has shape {self.q.shape}, expected {n + (3,)}")
        if not np.all(np.isfinite(self.rho)):
            raise DomainError("rho contains non-finite values")
        if not np.all(np.isfinite(self.q)):
            raise DomainError("q contains non-finite values")
        if np.any(self.rho < 0.0):
            raise DomainError("rho contains negative values")

    def velocity(self, floor: float = 1e-300) -> np.ndarray:
        """u = q / rho, with the density floored to keep the division defined."""
        return self.q / np.maximum(self.rho, floor)[..., None]

    def copy(self) -> "FluidField":
        return FluidField(self.rho.copy(), self.q.copy())


@dataclass(eq=False)
class CoupledState:
    """Fluid field plus the body-frame total angular momentum M at time t.

    ``omega`` (angular velocity) and ``xi`` (body mass-center velocity) are
    diagnostic: they are recovered algebraically from (fluid, M) and cached
    here so the two coupling constraints hold exactly by construction:

    * ``mass_body * xi + sum(q) * vol = 0``
    * ``M - I_body @ omega - sum(rho * x cross u) * vol = 0``
    """

    fluid: FluidField
    M: np.ndarray
    t: float
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    xi: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "CoupledState":
        return CoupledState(
            self.fluid.copy(), self.M.copy(), self.t, self.omega.copy(), self.xi.copy()
        )


def skew(a) -> np.ndarray:
    """3x3 matrix K with K @ x = a cross x for every x; K is antisymmetric."""
    a = np.asarray(a, dtype=float)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise DomainError("skew expects a finite 3-vector")
    return np.array(
        [
            [0.0, -a[2], a[1]],
            [a[2], 0.0, -a[0]],
            [-a[1], a[0], 0.0],
        ]
    )


def pressure(law: PressureLaw, rho):
    """p(rho) = a * rho**gamma; monotone increasing, defined for rho >= 0."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0.0):
        raise DomainError("pressure is undefined for negative density")
    return law.a * rho**law.gamma


def dpressure(law: PressureLaw, rho):
    """p'(rho) = a * gamma * rho**(gamma - 1)."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0.0):
        raise DomainError("dpressure is undefined for negative density")
    return law.a * law.gamma * rho ** (law.gamma - 1.0)


def sound_speed(law: PressureLaw, rho):
    """c(rho) = sqrt(p'(rho)); used only by the time-step bound."""
    return np.sqrt(dpressure(law, rho))


def stress(grad_u, visc: ViscositySpec) -> np.ndarray:
    """Viscous stress S(G) = mu (G + G^T) + (lam - 2 mu / 3) tr(G) I.

    Accepts a single 3x3 gradient or a batch with shape (..., 3, 3).  The
    result is symmetric and vanishes on skew gradients (rigid rotations).
    """
    g = np.asarray(grad_u, dtype=float)
    if g.shape[-2:] != (3, 3):
        raise DomainError("stress expects velocity gradients of shape (..., 3, 3)")
    tr = np.trace(g, axis1=-2, axis2=-1)
    out = visc.mu * (g + np.swapaxes(g, -1, -2))
    coeff = visc.lam - 2.0 * visc.mu / 3.0
    out[..., 0, 0] += coeff * tr
    out[..., 1, 1] += coeff * tr
    out[..., 2, 2] += coeff * tr
    return out


def stress_power(grad_u, visc: ViscositySpec):
    """Local dissipation density S(G):G >= 0 for mu > 0, lam >= 0."""
    g = np.asarray(grad_u, dtype=float)
    sym = g + np.swapaxes(g, -1, -2)
    tr = np.trace(g, axis1=-2, axis2=-1)
    return 0.5 * visc.mu * np.einsum("...ij,...ij->...", sym, sym) + (
        visc.lam - 2.0 * visc.mu / 3.0
    ) * tr**2


def fluid_inertia(rho: np.ndarray, grid: CavityGrid) -> np.ndarray:
    """Inertia tensor of the fluid about the body origin: sum rho (|x|^2 I - x x^T) vol."""
    x = grid.centers.reshape(-1, 3)
    w = (np.asarray(rho, dtype=float) * grid.cell_volume).reshape(-1)
    xx = (x * w[:, None]).T @ x
    return np.trace(xx) * np.eye(3) - xx


def first_moment(rho: np.ndarray, grid: CavityGrid) -> np.ndarray:
    """First mass moment of the fluid: g = sum rho x vol."""
    w = np.asarray(rho, dtype=float)[..., None] * grid.centers
    return w.sum(axis=(0, 1, 2)) * grid.cell_volume


def total_inertia(body: BodySpec, rho: np.ndarray, total_mass: float) -> np.ndarray:
    """Inertia tensor of the coupled system about its combined mass center.

    I = I_body + I_fluid - (|g|^2 I - g g^T) / total_mass, where g is the
    fluid's first moment.  Symmetric positive definite for admissible inputs;
    a non-SPD result signals corrupted inputs and raises.
    """
    if not (total_mass > 0.0):
        raise DomainError(f"total mass must be positive, got {total_mass}")
    g = first_moment(rho, body.cavity)
    i_g = (np.dot(g, g) * np.eye(3) - np.outer(g, g)) / total_mass
    out = body.inertia + fluid_inertia(rho, body.cavity) - i_g
    out = 0.5 * (out + out.T)
    evals = np.linalg.eigvalsh(out)
    if evals[0] <= 0.0:
        raise InvariantViolation(
            "total inertia tensor lost positive definiteness "
            f"(eigenvalues {evals}); inputs are inconsistent"
        )
    return out


def pressure_potential(law: PressureLaw, rho_bar, rho):
    """Compression potential relative to the reference density rho_bar.

    P(rho) = a/(gamma-1) rho**gamma + a rho_bar**gamma
             - a*gamma/(gamma-1) rho_bar**(gamma-1) rho.

    Nonnegative, convex in rho, and zero exactly at rho = rho_bar; its
    integral is the potential part of the run energy.
    """
    rho = np.asarray(rho, dtype=float)
    rho_bar = np.asarray(rho_bar, dtype=float)
    if np.any(rho < 0.0) or np.any(rho_bar < 0.0):
        raise DomainError("pressure_potential is undefined for negative density")
    a, g = law.a, law.gamma
    return a / (g - 1.0) * rho**g + a * rho_bar**g - a * g / (g - 1.0) * rho_bar ** (g - 1.0) * rho


def density_relative_entropy(law: PressureLaw, rho, r):
    """Convexity gap of the pressure potential between rho and a reference r > 0.

    H(rho, r) = (p(rho) - p'(r)(rho - r) - p(r)) / (gamma - 1) >= 0, with
    equality iff rho = r.  This is the density part of the relative entropy
    between two flow states.
    """
    rho = np.asarray(rho, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise DomainError("reference density must be strictly positive")
    if np.any(rho < 0.0):
        raise DomainError("density must be nonnegative")
    return (pressure(law, rho) - dpressure(law, r) * (rho - r) - pressure(law, r)) / (
        law.gamma - 1.0
    )


def fluid_momentum(fluid: FluidField, grid: CavityGrid) -> np.ndarray:
    """Total fluid momentum sum(q) vol (fixed reduction order)."""
    return fluid.q.sum(axis=(0, 1, 2)) * grid.cell_volume


def fluid_angular_momentum(fluid: FluidField, grid: CavityGrid) -> np.ndarray:
    """Total fluid angular momentum about the body origin: sum(x cross q) vol."""
    return np.cross(grid.centers, fluid.q).sum(axis=(0, 1, 2)) * grid.cell_volume


def constraint_residuals(state: CoupledState, body: BodySpec, grid: CavityGrid):
    """Normalized residuals of the two coupling constraints of a state.

    Returns ``(r_xi, r_M)`` where ``r_xi`` measures
    ``mass_body * xi + sum(q) vol`` and ``r_M`` measures
    ``M - I_body @ omega - sum(x cross q) vol``, each divided by the natural
    magnitude of its terms (zero states report zero).
    """
    p_fluid = fluid_momentum(state.fluid, grid)
    lhs_xi = body.mass * state.xi + p_fluid
    s_xi = body.mass * np.linalg.norm(state.xi) + np.linalg.norm(p_fluid)
    r_xi = np.linalg.norm(lhs_xi) / s_xi if s_xi > 0.0 else 0.0

    l_fluid = fluid_angular_momentum(state.fluid, grid)
    body_part = body.inertia @ state.omega
    lhs_m = state.M - body_part - l_fluid
    s_m = np.linalg.norm(state.M) + np.linalg.norm(body_part) + np.linalg.norm(l_fluid)
    r_m = np.linalg.norm(lhs_m) / s_m if s_m > 0.0 else 0.0
    return float(r_xi), float(r_m)
