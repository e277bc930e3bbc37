"""Certificate functionals: energy, dissipation, relative entropy, conservation
monitors, renormalized-continuity residual, omega-limit detection, and
inertial-frame orientation reconstruction.

All diagnostics are pure functions over immutable snapshots; none of them feed
back into the dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    BodySpec,
    CavityGrid,
    CoupledState,
    PressureLaw,
    RegularizationSpec,
    ViscositySpec,
    constraint_residuals,
    density_relative_entropy,
    pressure_potential,
    skew,
)
from .dynamics import (
    Workspace,
    dissipation_rate,
    pad_density_extrap,
    pad_velocity,
    wall_torque,
)
from .errors import DomainError

__all__ = [
    "DiagnosticsSample",
    "Reference",
    "OrientationState",
    "OmegaLimitVerdict",
    "total_energy",
    "coupled_energy",
    "relative_entropy_total",
    "restrict_reference",
    "renorm_residual",
    "omega_limit_detect",
    "torque_residual",
    "advance_orientation",
    "compute_sample",
]


@dataclass(eq=False)
class DiagnosticsSample:
    """One row of run telemetry; every field is finite by construction."""

    t: float
    mass: float
    energy: float
    dissipation_rate: float
    m_norm: float
    omega: np.ndarray
    xi: np.ndarray
    v_l2: float
    rho_dev_l2: float
    constraint_xi: float
    constraint_m: float
    rel_entropy: float | None = None


@dataclass(eq=False)
class Reference:
    """Comparison state (r, U, Omega, Xi) for the relative entropy."""

    r: np.ndarray
    u: np.ndarray
    omega: np.ndarray
    xi: np.ndarray


@dataclass(eq=False)
class OrientationState:
    """Proper orthogonal body-to-inertial rotation Q(t)."""

    Q: np.ndarray
    t: float


def total_energy(
    state: CoupledState,
    law: PressureLaw,
    rho_bar: float,
    reg: RegularizationSpec,
    grid: CavityGrid,
) -> float:
    """Fluid energy: sum of kinetic plus compression-potential density over cells.

    E = sum (|q|^2 / (2 rho) + P(rho) [+ b/(beta-1) rho^beta]) vol, where P is
    the compression potential relative to rho_bar; nonnegative, zero exactly
    at uniform rest.
    """
    rho = state.fluid.rho
    q = state.fluid.q
    ke = 0.5 * np.einsum("...i,...i->...", q, q) / np.maximum(rho, 1e-300)
    e = ke + pressure_potential(law, rho_bar, rho)
    if reg.b > 0.0:
        e = e + reg.b / (reg.beta - 1.0) * rho**reg.beta
    return float(np.sum(e) * grid.cell_volume)


def coupled_energy(
    state: CoupledState,
    body: BodySpec,
    law: PressureLaw,
    rho_bar: float,
    reg: RegularizationSpec,
) -> float:
    """Energy of the coupled system: fluid quadrature plus the body's rigid
    kinetic energy (rotational about the mass center plus translational).

    This is the quantity the energy certificate bounds: it can only decrease,
    up to accumulated viscous dissipation and discretization error, while
    energy may slosh freely between the fluid-only part and the body.
    """
    e_fluid = total_energy(state, law, rho_bar, reg, body.cavity)
    e_body = 0.5 * float(state.omega @ body.inertia @ state.omega) + 0.5 * body.mass * float(
        np.dot(state.xi, state.xi)
    )
    return e_fluid + e_body


def relative_entropy_total(
    state: CoupledState,
    ref: Reference,
    law: PressureLaw,
    grid: CavityGrid,
    body: BodySpec | None = None,
) -> float:
    """Relative entropy of a state against a reference (r, U, Omega, Xi).

    Cell part: sum (rho |u - U|^2 / 2 + H(rho, r)) vol >= 0, zero iff the two
    states agree on cells.  When ``body`` is given, the rigid part
    (omega - Omega) . I_body (omega - Omega) / 2 + m_body |xi - Xi|^2 / 2 is
    added so the functional covers the whole coupled system.
    """
    if np.any(ref.r <= 0.0):
        raise DomainError("reference density must be strictly positive")
    rho = state.fluid.rho
    u = state.fluid.velocity()
    du = u - ref.u
    cell = 0.5 * rho * np.einsum("...i,...i->...", du, du) + density_relative_entropy(
        law, rho, ref.r
    )
    out = float(np.sum(cell) * grid.cell_volume)
    if body is not None:
        dw = state.omega - ref.omega
        dxi = state.xi - ref.xi
        out += 0.5 * float(dw @ body.inertia @ dw) + 0.5 * body.mass * float(np.dot(dxi, dxi))
    return out


def restrict_reference(state: CoupledState, fine: CavityGrid, coarse: CavityGrid) -> Reference:
    """Conservative restriction of a fine-grid state onto a coarser grid.

    Cell-volume averaging of rho and q (block means over integer refinement
    factors); the restricted velocity is the mass-weighted block velocity, so
    fluid mass and momentum are preserved exactly.
    """
    if fine.extents != coarse.extents or fine.offset != coarse.offset:
        raise DomainError("restriction requires identical cavity geometry")
    factors = []
    for nf, nc in zip(fine.counts, coarse.counts):
        if nf % nc != 0:
            raise DomainError(f"fine counts {fine.counts} not a multiple of coarse {coarse.counts}")
        factors.append(nf // nc)
    f1, f2, f3 = factors
    nc = coarse.counts

    def block_mean(a):
        return a.reshape(nc[0], f1, nc[1], f2, nc[2], f3, *a.shape[3:]).mean(axis=(1, 3, 5))

    r = block_mean(state.fluid.rho)
    qc = block_mean(state.fluid.q)
    u = qc / r[..., None]
    return Reference(r=r, u=u, omega=state.omega.copy(), xi=state.xi.copy())


def renorm_residual(
    state_a: CoupledState,
    state_b: CoupledState,
    dt: float,
    body: BodySpec,
    ws: Workspace | None = None,
) -> float:
    """Volume-integrated defect of the renormalized mass balance for rho ln rho.

    Checks d/dt (rho ln rho) + div((rho ln rho) v) + rho div v = 0 between two
    snapshots: the time derivative by differencing, the space terms with
    central differences at the midpoint fields.  Returns sum |defect| vol;
    decays at the scheme's order for resolved flows.
    """
    if ws is None:
        ws = Workspace(body.cavity)
    grid = ws.grid
    if np.any(state_a.fluid.rho <= 0.0) or np.any(state_b.fluid.rho <= 0.0):
        raise DomainError("renormalized residual needs strictly positive density")
    if not (dt > 0.0):
        raise DomainError("dt must be positive")

    def blog(r):
        return r * np.log(r)

    rho_m = 0.5 * (state_a.fluid.rho + state_b.fluid.rho)
    u_m = 0.5 * (state_a.fluid.velocity() + state_b.fluid.velocity())
    omega_m = 0.5 * (state_a.omega + state_b.omega)
    xi_m = 0.5 * (state_a.xi + state_b.xi)

    up = pad_velocity(u_m, omega_m, xi_m, ws)
    vp = up - (np.cross(omega_m, ws.padded_centers) + xi_m)
    bp = blog(np.maximum(pad_density_extrap(rho_m, ws), 1e-300))

    h = ws.h
    div_v = np.zeros(grid.counts)
    adv_b = np.zeros(grid.counts)
    for d in range(3):
        vm = np.moveaxis(vp, d, 0)
        bm = np.moveaxis(bp, d, 0)
        dv = (vm[2:, 1:-1, 1:-1, d] - vm[:-2, 1:-1, 1:-1, d]) / (2.0 * h[d])
        db = (bm[2:, 1:-1, 1:-1] - bm[:-2, 1:-1, 1:-1]) / (2.0 * h[d])
        np.moveaxis(div_v, d, 0)[...] += dv
        np.moveaxis(adv_b, d, 0)[...] += db * vm[1:-1, 1:-1, 1:-1, d]

    b_c = blog(rho_m)
    defect = (
        (blog(state_b.fluid.rho) - blog(state_a.fluid.rho)) / dt
        + adv_b
        + b_c * div_v
        + rho_m * div_v
    )
    return float(np.sum(np.abs(defect)) * grid.cell_volume)


@dataclass(eq=False)
class OmegaLimitVerdict:
    """Outcome of long-time convergence detection over a sample window."""

    converged: bool
    score: float
    tol: float
    window: int
    limit_rho: np.ndarray | None = None
    limit_omega: np.ndarray | None = None
    limit_xi: np.ndarray | None = None
    band_ok: bool | None = None


@dataclass(eq=False)
class OmegaLimitSample:
    """One detector input: time, |v|_2, and the slow variables."""

    t: float
    v_l2: float
    rho: np.ndarray
    omega: np.ndarray
    xi: np.ndarray


def omega_limit_detect(
    samples, window: int, tol: float, grid: CavityGrid, rho_bar: float
) -> OmegaLimitVerdict:
    """Decide whether the trajectory has settled onto a limit state.

    Over the last ``window`` samples the score
    |v|_2 + |rho - rho_last|_2 + |omega - omega_last| + |xi - xi_last|
    must stay below ``tol``.  On convergence the limit tuple is reported along
    with the cellwise check that the limit density stays inside the band
    (rho_bar/2, 3 rho_bar/2) expected of small-data long-time states.
    """
    samples = list(samples)
    if window < 2:
        raise DomainError("window must be at least 2 samples")
    if len(samples) < window:
        return OmegaLimitVerdict(converged=False, score=np.inf, tol=tol, window=window)
    tail = samples[-window:]
    last = tail[-1]
    vol = grid.cell_volume
    score = 0.0
    for s in tail:
        drho = np.sqrt(np.sum((s.rho - last.rho) ** 2) * vol)
        val = (
            s.v_l2
            + drho
            + float(np.linalg.norm(s.omega - last.omega))
            + float(np.linalg.norm(s.xi - last.xi))
        )
        score = max(score, val)
    if score > tol:
        return OmegaLimitVerdict(converged=False, score=score, tol=tol, window=window)
    band_ok = bool(np.all(last.rho > 0.5 * rho_bar) and np.all(last.rho < 1.5 * rho_bar))
    return OmegaLimitVerdict(
        converged=True,
        score=score,
        tol=tol,
        window=window,
        limit_rho=last.rho.copy(),
        limit_omega=last.omega.copy(),
        limit_xi=last.xi.copy(),
        band_ok=band_ok,
    )


def torque_residual(
    state_a: CoupledState,
    state_b: CoupledState,
    body: BodySpec,
    law: PressureLaw,
    visc: ViscositySpec,
    reg: RegularizationSpec | None = None,
    ws: Workspace | None = None,
) -> np.ndarray:
    """Mismatch between the body's angular-momentum balance and the wall torque.

    The balance reads I_body domega/dt + omega x (I_body omega) = -(wall
    torque); this evaluates the left side by finite-differencing omega between
    two consecutive samples (midpoint omega for the gyroscopic term) and the
    right side by wall quadrature averaged over the two states, returning the
    residual 3-vector (first order in h and dt; zero at rest)."""
    if ws is None:
        ws = Workspace(body.cavity)
    dt = state_b.t - state_a.t
    omega_mid = 0.5 * (state_a.omega + state_b.omega)
    if dt > 0.0:
        domega = (state_b.omega - state_a.omega) / dt
    else:
        domega = np.zeros(3)
    gyro = body.inertia @ domega + np.cross(omega_mid, body.inertia @ omega_mid)
    torque = 0.5 * (
        wall_torque(state_a, body, law, visc, reg, ws)
        + wall_torque(state_b, body, law, visc, reg, ws)
    )
    return gyro + torque


def _rotation_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix exp(skew(w)) via the closed form (series near zero)."""
    theta = float(np.linalg.norm(w))
    k = skew(w)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * (k @ k)
    k = k / theta
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def _polar_orthonormalize(q: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(q)
    out = u @ vt
    if np.linalg.det(out) < 0.0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


def advance_orientation(o: OrientationState, omega_samples, dt: float) -> OrientationState:
    """Advance the body-to-inertial rotation through one step.

    Uses the midpoint body-frame rate (the mean of the supplied samples) in
    the closed-form rotation update Q <- Q exp(skew(omega_mid) dt), followed
    by polar re-orthonormalization so Q stays proper orthogonal to 1e-10.
    """
    w = np.atleast_2d(np.asarray(omega_samples, dtype=float)).mean(axis=0)
    q = o.Q @ _rotation_exp(w * dt)
    return OrientationState(Q=_polar_orthonormalize(q), t=o.t + dt)


def compute_sample(
    state: CoupledState,
    body: BodySpec,
    law: PressureLaw,
    visc: ViscositySpec,
    reg: RegularizationSpec,
    rho_bar: float,
    ws: Workspace | None = None,
    reference: Reference | None = None,
) -> DiagnosticsSample:
    """Assemble the full telemetry row for one state."""
    if ws is None:
        ws = Workspace(body.cavity)
    grid = ws.grid
    vol = grid.cell_volume
    rho = state.fluid.rho
    u = state.fluid.velocity()
    v = u - (np.cross(state.omega, grid.centers) + state.xi)
    r_xi, r_m = constraint_residuals(state, body, grid)
    sample = DiagnosticsSample(
        t=float(state.t),
        mass=float(np.sum(rho) * vol),
        energy=coupled_energy(state, body, law, rho_bar, reg),
        dissipation_rate=dissipation_rate(state, body, visc, ws),
        m_norm=float(np.linalg.norm(state.M)),
        omega=state.omega.copy(),
        xi=state.xi.copy(),
        v_l2=float(np.sqrt(np.sum(np.einsum("...i,...i->...", v, v)) * vol)),
        rho_dev_l2=float(np.sqrt(np.sum((rho - rho_bar) ** 2) * vol)),
        constraint_xi=r_xi,
        constraint_m=r_m,
        rel_entropy=(
            relative_entropy_total(state, reference, law, grid, body)
            if reference is not None
            else None
        ),
    )
    values = [
        sample.t,
        sample.mass,
        sample.energy,
        sample.dissipation_rate,
        sample.m_norm,
        sample.v_l2,
        sample.rho_dev_l2,
        sample.constraint_xi,
        sample.constraint_m,
    ]
    if not all(np.isfinite(v) for v in values) or not (sample.mass > 0.0):
        raise DomainError("diagnostics sample contains non-finite entries or zero mass")
    return sample
