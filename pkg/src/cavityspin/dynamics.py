"""Finite-volume dynamics of the cavity fluid coupled to the rigid body.

State layout: cell-centered density ``rho`` and momentum density ``q`` on the
structured cavity grid, plus the total angular momentum ``M`` of the coupled
system in the body frame.  ``M`` is prognostic (dM/dt = omega x M, so |M| is
conserved exactly in the continuum); the angular velocity ``omega`` and the
body mass-center velocity ``xi`` are recovered algebraically each stage from

    xi    = -(1/m_body) sum q vol,
    omega = I_body^{-1} (M - sum x cross q vol).

Spatial scheme: conservative fluxes with unlimited central-slope linear
reconstruction and a Rusanov (local Lax-Friedrichs) flux whose transporting
field is the relative velocity v = u - omega x x - xi and whose wave speed is
|v.n| + c.  v vanishes at the cavity wall, and wall faces carry exactly zero
convective flux, so total fluid mass is conserved to round-off.  Pressure and
viscous terms use second-order central differences through one ghost layer:

* velocity ghosts mirror the rigid wall trace, u_ghost = 2 u_wall - u_interior;
* density ghosts are quadratically extrapolated wherever the density feeds the
  pressure or the reconstruction (the steady centrifugal profile has nonzero
  wall-normal gradient, and a mirrored ghost would wrongly flatten it);
* the artificial-diffusion term d*lap(rho) alone uses mirrored ghosts, since
  a homogeneous Neumann wall condition is part of that regularization.

Time stepping is two-stage Heun (RK2) with a floor-and-count positivity guard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    BodySpec,
    CavityGrid,
    CoupledState,
    FluidField,
    PressureLaw,
    RegularizationSpec,
    ViscositySpec,
    fluid_angular_momentum,
    fluid_momentum,
    stress_power,
)
from .errors import DomainError, NumericsError, PositivityError

__all__ = [
    "Tendency",
    "StepControl",
    "RunCounters",
    "Workspace",
    "make_state",
    "recover_kinematics",
    "relative_velocity",
    "spatial_residual",
    "cfl_dt",
    "step",
    "simulate",
    "dissipation_rate",
    "wall_torque",
]


@dataclass(eq=False)
class Tendency:
    """Time derivatives of (rho, q, M) produced by the spatial discretization."""

    drho: np.ndarray
    dq: np.ndarray
    dM: np.ndarray


@dataclass(frozen=True)
class StepControl:
    """Explicit time-step control: Courant number, hard cap, positivity floor."""

    cfl: float = 0.3
    dt_max: float = math.inf
    rho_min: float = 1e-12

    def __post_init__(self):
        if not (0.0 < self.cfl <= 1.0):
            raise DomainError(f"cfl must lie in (0, 1], got {self.cfl}")
        if not (self.dt_max > 0.0):
            raise DomainError(f"dt_max must be positive, got {self.dt_max}")
        if not (self.rho_min > 0.0):
            raise DomainError(f"rho_min must be positive, got {self.rho_min}")


@dataclass
class RunCounters:
    """Mutable bookkeeping carried across a run (checkpointable)."""

    steps: int = 0
    floor_activations: int = 0
    cum_dissipation: float = 0.0


class Workspace:
    """Precomputed geometry for one grid: face/ghost coordinates in the layouts
    the per-axis flux loops consume."""

    def __init__(self, grid: CavityGrid):
        self.grid = grid
        self.h = grid.spacing
        n = grid.counts
        centers = [grid.axis_centers(d) for d in range(3)]
        lo = [grid.offset[d] - 0.5 * grid.extents[d] for d in range(3)]
        hi = [grid.offset[d] + 0.5 * grid.extents[d] for d in range(3)]
        self.padded_axes = [
            np.concatenate(([centers[d][0] - self.h[d]], centers[d], [centers[d][-1] + self.h[d]]))
            for d in range(3)
        ]
        self.face_axes = [lo[d] + np.arange(n[d] + 1) * self.h[d] for d in range(3)]

        def coords(ax0_vals, ax1_vals, ax2_vals, moved_axis):
            """Coordinate array in moveaxis(…, moved_axis, 0) layout."""
            vals = [np.asarray(ax0_vals), np.asarray(ax1_vals), np.asarray(ax2_vals)]
            others = [a for a in range(3) if a != moved_axis]
            shape = (len(vals[moved_axis]), len(vals[others[0]]), len(vals[others[1]]), 3)
            out = np.empty(shape)
            out[..., moved_axis] = vals[moved_axis][:, None, None]
            out[..., others[0]] = vals[others[0]][None, :, None]
            out[..., others[1]] = vals[others[1]][None, None, :]
            return out

        # Interior-face centers per axis, moved layout (n_d - 1, o1, o2, 3).
        self.interior_face_coords = []
        # Wall-face centers per axis and side, moved layout minus the first dim.
        self.wall_face_coords = []
        for d in range(3):
            others = [a for a in range(3) if a != d]
            vals = [None, None, None]
            vals[d] = self.face_axes[d][1:-1]
            vals[others[0]] = centers[others[0]]
            vals[others[1]] = centers[others[1]]
            self.interior_face_coords.append(coords(vals[0], vals[1], vals[2], d))
            walls = []
            for wall_pos in (lo[d], hi[d]):
                vals[d] = np.array([wall_pos])
                walls.append(coords(vals[0], vals[1], vals[2], d)[0])
            self.wall_face_coords.append(walls)

        # Wall coordinates used by the sequential ghost-fill passes: pass d
        # spans the already-padded ranges of axes < d and interior ranges of
        # axes > d.
        self.ghost_wall_coords = []
        for d in range(3):
            span = [
                self.padded_axes[a] if a < d else centers[a] for a in range(3) if a != d
            ]
            walls = []
            for wall_pos in (lo[d], hi[d]):
                vals = [None, None, None]
                others = [a for a in range(3) if a != d]
                vals[d] = np.array([wall_pos])
                vals[others[0]] = span[0]
                vals[others[1]] = span[1]
                walls.append(coords(vals[0], vals[1], vals[2], d)[0])
            self.ghost_wall_coords.append(walls)

        self._padded_centers = None

    @property
    def padded_centers(self) -> np.ndarray:
        """Cell-center coordinates including the ghost layer, shape (n+2, ..., 3)."""
        if self._padded_centers is None:
            ax = self.padded_axes
            out = np.empty((len(ax[0]), len(ax[1]), len(ax[2]), 3))
            out[..., 0] = ax[0][:, None, None]
            out[..., 1] = ax[1][None, :, None]
            out[..., 2] = ax[2][None, None, :]
            self._padded_centers = out
        return self._padded_centers


def _rigid(omega, xi, x):
    return np.cross(omega, x) + xi


def pad_density_extrap(rho: np.ndarray, ws: Workspace) -> np.ndarray:
    """Pad rho with one ghost layer by quadratic extrapolation (linear for n=2)."""
    n = rho.shape
    out = np.empty((n[0] + 2, n[1] + 2, n[2] + 2))
    out[1:-1, 1:-1, 1:-1] = rho

    def extrap(a0, a1, a2):
        return 3.0 * a0 - 3.0 * a1 + a2

    for d in range(3):
        v = np.moveaxis(out, d, 0)
        inner = tuple(slice(1, -1) if a > d else slice(None) for a in range(3) if a != d)
        if n[d] >= 3:
            v[0][inner] = extrap(v[1][inner], v[2][inner], v[3][inner])
            v[-1][inner] = extrap(v[-2][inner], v[-3][inner], v[-4][inner])
        else:
            v[0][inner] = 2.0 * v[1][inner] - v[2][inner]
            v[-1][inner] = 2.0 * v[-2][inner] - v[-3][inner]
    return out


def pad_density_mirror(rho: np.ndarray, ws: Workspace) -> np.ndarray:
    """Pad rho with mirrored ghosts (homogeneous Neumann wall condition)."""
    n = rho.shape
    out = np.empty((n[0] + 2, n[1] + 2, n[2] + 2))
    out[1:-1, 1:-1, 1:-1] = rho
    for d in range(3):
        v = np.moveaxis(out, d, 0)
        inner = tuple(slice(1, -1) if a > d else slice(None) for a in range(3) if a != d)
        v[0][inner] = v[1][inner]
        v[-1][inner] = v[-2][inner]
    return out


def pad_velocity(u: np.ndarray, omega, xi, ws: Workspace) -> np.ndarray:
    """Pad u with ghosts mirroring the rigid wall trace: u_g = 2 u_wall - u_int."""
    n = u.shape[:3]
    out = np.empty((n[0] + 2, n[1] + 2, n[2] + 2, 3))
    out[1:-1, 1:-1, 1:-1] = u
    for d in range(3):
        v = np.moveaxis(out, d, 0)
        inner = tuple(slice(1, -1) if a > d else slice(None) for a in range(3) if a != d)
        lo_wall, hi_wall = ws.ghost_wall_coords[d]
        v[0][inner] = 2.0 * _rigid(omega, xi, lo_wall) - v[1][inner]
        v[-1][inner] = 2.0 * _rigid(omega, xi, hi_wall) - v[-2][inner]
    return out


def recover_kinematics(fluid: FluidField, M, body: BodySpec, grid: CavityGrid):
    """Algebraic recovery of (omega, xi) from the fluid field and M."""
    xi = -fluid_momentum(fluid, grid) / body.mass
    omega = np.linalg.solve(body.inertia, np.asarray(M, float) - fluid_angular_momentum(fluid, grid))
    return omega, xi


def make_state(fluid: FluidField, M, t: float, body: BodySpec, grid: CavityGrid) -> CoupledState:
    """Build a CoupledState whose cached (omega, xi) satisfy the constraints exactly."""
    M = np.asarray(M, dtype=float).copy()
    omega, xi = recover_kinematics(fluid, M, body, grid)
    return CoupledState(fluid=fluid, M=M, t=float(t), omega=omega, xi=xi)


def relative_velocity(u, x, omega, xi):
    """v = u - omega x x - xi; zero exactly when u is the rigid field."""
    return np.asarray(u, float) - np.cross(omega, np.asarray(x, float)) - np.asarray(xi, float)


def _pressure_reg(law: PressureLaw, reg: RegularizationSpec, rho):
    p = law.a * rho**law.gamma
    if reg.b > 0.0:
        p = p + reg.b * rho**reg.beta
    return p


def _dpressure_reg(law: PressureLaw, reg: RegularizationSpec, rho):
    dp = law.a * law.gamma * rho ** (law.gamma - 1.0)
    if reg.b > 0.0:
        dp = dp + reg.b * reg.beta * rho ** (reg.beta - 1.0)
    return dp


def _check_finite(state: CoupledState):
    for name, arr in (("density", state.fluid.rho), ("momentum", state.fluid.q)):
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            cell = tuple(int(i) for i in bad[:3])
            raise NumericsError(f"non-finite {name} at cell {cell}")
    if not np.all(np.isfinite(state.M)):
        raise NumericsError("non-finite angular momentum M")


def _viscous_face_columns(up_moved, d: int, others, h, visc: ViscositySpec):
    """Stress flux column S(grad u) . e_d on every axis-d face (moved layout).

    ``up_moved`` is the padded velocity with axis d moved first, shape
    (n_d + 2, o1 + 2, o2 + 2, 3); the result has shape (n_d + 1, o1, o2, 3).
    """
    t1, t2 = others
    h_d, h_t1, h_t2 = h[d], h[t1], h[t2]
    dn = (up_moved[1:, 1:-1, 1:-1] - up_moved[:-1, 1:-1, 1:-1]) / h_d
    ct1 = (up_moved[:, 2:, 1:-1] - up_moved[:, :-2, 1:-1]) / (2.0 * h_t1)
    ct2 = (up_moved[:, 1:-1, 2:] - up_moved[:, 1:-1, :-2]) / (2.0 * h_t2)
    dt1 = 0.5 * (ct1[:-1] + ct1[1:])
    dt2 = 0.5 * (ct2[:-1] + ct2[1:])

    tr = dn[..., d] + dt1[..., t1] + dt2[..., t2]
    col = visc.mu * dn.copy()
    col[..., t1] += visc.mu * dt1[..., d]
    col[..., t2] += visc.mu * dt2[..., d]
    col[..., d] += visc.mu * dn[..., d] + (visc.lam - 2.0 * visc.mu / 3.0) * tr
    return col


def spatial_residual(
    state: CoupledState,
    body: BodySpec,
    law: PressureLaw,
    visc: ViscositySpec,
    reg: RegularizationSpec,
    rho_floor: float = 1e-300,
    ws: Workspace | None = None,
) -> Tendency:
    """Semi-discrete right-hand side d(rho, q, M)/dt of the coupled system.

    drho = -div(rho v)            [+ d lap(rho)]
    dq   = -div(rho v (x) u) - rho omega x u - grad p [+ b rho^beta term in p]
           + div S(grad u)        [- d (grad rho . grad) u]
    dM   = omega x M
    """
    if ws is None:
        ws = Workspace(body.cavity)
    _check_finite(state)

    rho = state.fluid.rho
    omega, xi = state.omega, state.xi
    u = state.fluid.velocity(rho_floor)
    h = ws.h

    rp = pad_density_extrap(rho, ws)
    rp_pos = np.maximum(rp, 0.0)
    up = pad_velocity(u, omega, xi, ws)
    p_pad = _pressure_reg(law, reg, rp_pos)

    drho = np.zeros_like(rho)
    dq = np.zeros_like(state.fluid.q)

    for d in range(3):
        others = [a for a in range(3) if a != d]
        rpm = np.moveaxis(rp, d, 0)[:, 1:-1, 1:-1]
        upm_int = np.moveaxis(up, d, 0)[:, 1:-1, 1:-1, :]
        rc = rpm[1:-1]
        uc = upm_int[1:-1]

        # Central-slope linear reconstruction to the two sides of each
        # interior face; wall faces carry exactly zero convective flux.
        dr4 = 0.25 * (rpm[2:] - rpm[:-2])
        du4 = 0.25 * (upm_int[2:] - upm_int[:-2])
        rho_l = rc[:-1] + dr4[:-1]
        rho_r = rc[1:] - dr4[1:]
        u_l = uc[:-1] + du4[:-1]
        u_r = uc[1:] - du4[1:]

        rigid_n = _rigid(omega, xi, ws.interior_face_coords[d])[..., d]
        vn_l = u_l[..., d] - rigid_n
        vn_r = u_r[..., d] - rigid_n
        c_l = np.sqrt(_dpressure_reg(law, reg, np.maximum(rho_l, 0.0)))
        c_r = np.sqrt(_dpressure_reg(law, reg, np.maximum(rho_r, 0.0)))
        s = np.maximum(np.abs(vn_l) + c_l, np.abs(vn_r) + c_r)

        f_l = rho_l * vn_l
        f_r = rho_r * vn_r
        flux_rho = 0.5 * (f_l + f_r) - 0.5 * s * (rho_r - rho_l)
        flux_q = 0.5 * (f_l[..., None] * u_l + f_r[..., None] * u_r) - 0.5 * s[..., None] * (
            rho_r[..., None] * u_r - rho_l[..., None] * u_l
        )

        dm = np.moveaxis(drho, d, 0)
        dm[:-1] -= flux_rho / h[d]
        dm[1:] += flux_rho / h[d]
        dqm = np.moveaxis(dq, d, 0)
        dqm[:-1] -= flux_q / h[d]
        dqm[1:] += flux_q / h[d]

        # Pressure on every face (walls included) from cell averages.
        pm = np.moveaxis(p_pad, d, 0)[:, 1:-1, 1:-1]
        pface = 0.5 * (pm[:-1] + pm[1:])
        dqm[..., d] -= (pface[1:] - pface[:-1]) / h[d]

        # Viscous stress flux on every face.
        upm_full = np.moveaxis(up, d, 0)
        col = _viscous_face_columns(upm_full, d, others, h, visc)
        dqm += (col[1:] - col[:-1]) / h[d]

    # Frame term: the body-frame momentum balance carries rho omega x u.
    dq -= rho[..., None] * np.cross(omega, u)

    if reg.d > 0.0:
        rp_m = pad_density_mirror(rho, ws)
        lap = np.zeros_like(rho)
        grad_terms = np.zeros_like(dq)
        for d in range(3):
            rm = np.moveaxis(rp_m, d, 0)[:, 1:-1, 1:-1]
            lm = np.moveaxis(lap, d, 0)
            lm += (rm[2:] - 2.0 * rm[1:-1] + rm[:-2]) / (h[d] * h[d])
            grho = (rm[2:] - rm[:-2]) / (2.0 * h[d])
            um = np.moveaxis(up, d, 0)[:, 1:-1, 1:-1, :]
            gu = (um[2:] - um[:-2]) / (2.0 * h[d])
            gm = np.moveaxis(grad_terms, d, 0)
            gm += grho[..., None] * gu
        drho += reg.d * lap
        dq -= reg.d * grad_terms

    dM = np.cross(omega, state.M)
    return Tendency(drho=drho, dq=dq, dM=dM)


def cfl_dt(
    state: CoupledState,
    body: BodySpec,
    law: PressureLaw,
    visc: ViscositySpec,
    reg: RegularizationSpec,
    ctrl: StepControl,
    ws: Workspace | None = None,
) -> float:
    """Stable explicit time step: cfl times the tightest of the acoustic bound
    h/(|v| + c), the viscous bound h^2 rho / (2 (2 mu + lam)), and, when
    artificial diffusion is on, h^2 / (2 d); capped by dt_max."""
    if ws is None:
        ws = Workspace(body.cavity)
    grid = ws.grid
    rho = state.fluid.rho

    vac = rho <= ctrl.rho_min
    if np.any(vac):
        # Only a cell whose whole 7-point stencil sits at the floor counts as
        # vacuum; isolated floored cells merely shrink the step.
        region = vac.copy()
        for d in range(3):
            m = np.moveaxis(vac, d, 0)
            r = np.moveaxis(region, d, 0)
            prev = np.ones_like(m)
            prev[1:] = m[:-1]
            nxt = np.ones_like(m)
            nxt[:-1] = m[1:]
            r &= prev & nxt
        if np.any(region):
            cell = tuple(int(i) for i in np.argwhere(region)[0])
            raise PositivityError(f"vacuum region at the density floor around cell {cell}")

    u = state.fluid.velocity(ctrl.rho_min)
    v = u - _rigid(state.omega, state.xi, grid.centers)
    speed = np.sqrt(np.einsum("...i,...i->...", v, v))
    c = np.sqrt(_dpressure_reg(law, reg, rho))
    h = grid.min_spacing

    dt = float(np.min(h / (speed + c + 1e-300)))
    dt = min(dt, float(np.min(h * h * rho / (2.0 * (2.0 * visc.mu + visc.lam)))))
    if reg.d > 0.0:
        dt = min(dt, h * h / (2.0 * reg.d))
    return min(ctrl.cfl * dt, ctrl.dt_max)


def _advance(state, dt, tend, body, grid, ctrl):
    rho = state.fluid.rho + dt * tend.drho
    floored = int(np.count_nonzero(rho < ctrl.rho_min))
    if floored:
        rho = np.maximum(rho, ctrl.rho_min)
    fluid = FluidField(rho, state.fluid.q + dt * tend.dq)
    new = make_state(fluid, state.M + dt * tend.dM, state.t + dt, body, grid)
    return new, floored


def step(
    state: CoupledState,
    dt: float,
    body: BodySpec,
    law: PressureLaw,
    visc: ViscositySpec,
    reg: RegularizationSpec,
    ctrl: StepControl,
    ws: Workspace | None = None,
    counters: RunCounters | None = None,
) -> CoupledState:
    """One Heun (two-stage, second-order) step of size dt.

    Each stage re-recovers the kinematics before evaluating the spatial
    residual; density is floored at ctrl.rho_min with the activation count
    accumulated into ``counters`` (a floored run is not certifiable).
    """
    if ws is None:
        ws = Workspace(body.cavity)
    grid = ws.grid
    k0 = spatial_residual(state, body, law, visc, reg, ctrl.rho_min, ws)
    mid, f0 = _advance(state, dt, k0, body, grid, ctrl)
    k1 = spatial_residual(mid, body, law, visc, reg, ctrl.rho_min, ws)
    avg = Tendency(
        drho=0.5 * (k0.drho + k1.drho),
        dq=0.5 * (k0.dq + k1.dq),
        dM=0.5 * (k0.dM + k1.dM),
    )
    out, f1 = _advance(state, dt, avg, body, grid, ctrl)
    if counters is not None:
        counters.floor_activations += f0 + f1
    return out


def dissipation_rate(
    state: CoupledState, body: BodySpec, visc: ViscositySpec, ws: Workspace | None = None
) -> float:
    """Instantaneous viscous dissipation sum S(grad u):grad u vol over the cavity."""
    if ws is None:
        ws = Workspace(body.cavity)
    grid = ws.grid
    u = state.fluid.velocity()
    up = pad_velocity(u, state.omega, state.xi, ws)
    g = np.empty(grid.counts + (3, 3))
    for d in range(3):
        um = np.moveaxis(up, d, 0)
        gm = np.moveaxis(g, d, 0)
        gm[..., d] = (um[2:, 1:-1, 1:-1] - um[:-2, 1:-1, 1:-1]) / (2.0 * ws.h[d])
    return float(np.sum(stress_power(g, visc)) * grid.cell_volume)


def wall_torque(
    state: CoupledState,
    body: BodySpec,
    law: PressureLaw,
    visc: ViscositySpec,
    reg: RegularizationSpec | None = None,
    ws: Workspace | None = None,
) -> np.ndarray:
    """Discrete wall quadrature of the fluid torque: integral of x cross (T.n)
    over the cavity boundary, with T = S(grad u) - p I and n pointing out of
    the fluid."""
    if ws is None:
        ws = Workspace(body.cavity)
    if reg is None:
        reg = RegularizationSpec()
    grid = ws.grid
    h = ws.h
    rho = state.fluid.rho
    u = state.fluid.velocity()
    rp = np.maximum(pad_density_extrap(rho, ws), 0.0)
    up = pad_velocity(u, state.omega, state.xi, ws)
    p_pad = _pressure_reg(law, reg, rp)

    torque = np.zeros(3)
    for d in range(3):
        others = [a for a in range(3) if a != d]
        upm = np.moveaxis(up, d, 0)
        col = _viscous_face_columns(upm, d, others, h, visc)
        pm = np.moveaxis(p_pad, d, 0)[:, 1:-1, 1:-1]
        pface = 0.5 * (pm[:-1] + pm[1:])
        area = grid.cell_volume / h[d]
        for side, sign in ((0, -1.0), (-1, 1.0)):
            traction = sign * col[side]
            traction[..., d] -= sign * pface[side]
            x_f = ws.wall_face_coords[d][0 if side == 0 else 1]
            torque += np.cross(x_f, traction).sum(axis=(0, 1)) * area
    return torque


def simulate(
    state: CoupledState,
    t_end: float,
    body: BodySpec,
    law: PressureLaw,
    visc: ViscositySpec,
    reg: RegularizationSpec,
    ctrl: StepControl,
    sink=None,
    sample_every: int = 1,
    ws: Workspace | None = None,
    counters: RunCounters | None = None,
    max_steps: int | None = None,
    land_times=None,
):
    """Advance the state to t_end, emitting samples to ``sink`` at a fixed
    step cadence (always including the initial and final states).

    ``sink`` is called as ``sink(state, counters)``.  ``land_times`` is an
    ascending sequence of times the integrator must hit exactly (steps are
    shortened as needed), which lets separate runs produce snapshots at
    matching times.  The run is deterministic for identical inputs: the step
    size is a pure function of the state and all reductions are fixed-order.
    Returns ``(final_state, counters)``.
    """
    if ws is None:
        ws = Workspace(body.cavity)
    grid = ws.grid
    state.fluid.validate(grid)
    zero_rho = state.fluid.rho == 0.0
    if np.any(zero_rho) and np.any(state.fluid.q[zero_rho] != 0.0):
        raise DomainError("initial momentum must vanish wherever the density vanishes")
    if counters is None:
        counters = RunCounters()

    t_scale = max(abs(t_end), 1.0)
    eps = 1e-14 * t_scale
    marks = [] if land_times is None else [float(m) for m in land_times]
    mark_idx = 0
    while mark_idx < len(marks) and marks[mark_idx] <= state.t + eps:
        mark_idx += 1

    d_prev = dissipation_rate(state, body, visc, ws)
    if sink is not None and counters.steps == 0:
        sink(state, counters)

    while t_end - state.t > eps:
        dt = cfl_dt(state, body, law, visc, reg, ctrl, ws)
        dt = min(dt, t_end - state.t)
        if mark_idx < len(marks) and marks[mark_idx] - state.t > eps:
            dt = min(dt, marks[mark_idx] - state.t)
        state = step(state, dt, body, law, visc, reg, ctrl, ws, counters)
        counters.steps += 1
        while mark_idx < len(marks) and marks[mark_idx] <= state.t + eps:
            mark_idx += 1
        d_now = dissipation_rate(state, body, visc, ws)
        counters.cum_dissipation += 0.5 * dt * (d_prev + d_now)
        d_prev = d_now
        final = t_end - state.t <= eps
        if sink is not None and (counters.steps % sample_every == 0 or final):
            sink(state, counters)
        if max_steps is not None and counters.steps >= max_steps and not final:
            raise NumericsError(f"step budget {max_steps} exhausted at t={state.t}")
    return state, counters
