"""Run configuration: strict JSON schema, canonical serialization, hashing,
and deterministic construction of initial states.

A configuration is a single JSON document with lower_snake_case keys; unknown
keys are errors.  ``serialize(parse(file))`` is idempotent, and the sha256 of
the canonical serialization identifies a run for checkpoint compatibility.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BodySpec,
    CavityGrid,
    CoupledState,
    FluidField,
    PressureLaw,
    RegularizationSpec,
    ViscositySpec,
    fluid_inertia,
    first_moment,
)
from .dynamics import StepControl, make_state
from .errors import ConfigError

__all__ = [
    "InitialSpec",
    "OutputSpec",
    "OmegaLimitSpec",
    "SteadySpec",
    "StudySpec",
    "RunConfig",
    "parse_config",
    "load_config",
    "serialize_config",
    "config_hash",
    "init_descriptor_hash",
    "build_initial_state",
    "worker_count",
]

# Calibrated once by grid/step refinement of the energy certificate on the
# rigid-rotation preset, then frozen (see tests); the certificate bound is
# E(t) + cumulative dissipation <= E(0) * (1 + C * (h + dt)).
ENERGY_MARGIN_COEFF = 0.5


@dataclass(frozen=True)
class InitialSpec:
    kind: str = "rest"
    omega0: tuple[float, float, float] = (0.0, 0.0, 0.0)
    epsilon: float = 0.0
    seed: int = 0
    perturbation_cells: tuple[int, int, int] | None = None
    zero_angular_momentum: bool = False
    path: str | None = None


@dataclass(frozen=True)
class OutputSpec:
    directory: str | None = None
    sample_every_steps: int = 50
    snapshot_every_time: float = 0.0
    checkpoint_every_steps: int = 0


@dataclass(frozen=True)
class OmegaLimitSpec:
    window: int = 5
    tol: float = 1e-5


@dataclass(frozen=True)
class SteadySpec:
    angular_momentum: float = 0.0
    axis_index: int = 2
    tol: float = 1e-12
    max_iter: int = 200


@dataclass(frozen=True)
class StudySpec:
    d_values: tuple[float, ...] = ()
    b_values: tuple[float, ...] = ()
    grid_counts: tuple[int, ...] = ()
    dt_values: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class RunConfig:
    grid: CavityGrid
    body: BodySpec
    law: PressureLaw
    visc: ViscositySpec
    reg: RegularizationSpec
    fluid_mass: float
    initial: InitialSpec
    t_end: float
    control: StepControl
    output: OutputSpec
    omega_limit: OmegaLimitSpec | None = None
    steady: SteadySpec | None = None
    study: StudySpec | None = None
    energy_margin_coeff: float = ENERGY_MARGIN_COEFF

    @property
    def rho_bar(self) -> float:
        return self.fluid_mass / self.grid.volume


def _take(mapping: dict, section: str, keys: dict):
    """Strict extraction: every present key must be known, types must match."""
    if not isinstance(mapping, dict):
        raise ConfigError(f"section '{section}' must be a JSON object")
    unknown = set(mapping) - set(keys)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")
    out = {}
    for name, (required, conv) in keys.items():
        if name in mapping:
            try:
                out[name] = conv(mapping[name])
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"bad value for '{section}.{name}': {exc}") from exc
        elif required:
            raise ConfigError(f"missing required key '{section}.{name}'")
    return out


def _float(x):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"expected a number, got {x!r}")
    return float(x)


def _float_or_inf(x):
    # JSON has no infinity literal; an unbounded dt cap round-trips as "inf".
    if x == "inf":
        return math.inf
    return _float(x)


def _int(x):
    if isinstance(x, bool) or not isinstance(x, int):
        raise ConfigError(f"expected an integer, got {x!r}")
    return int(x)


def _bool(x):
    if not isinstance(x, bool):
        raise ConfigError(f"expected a boolean, got {x!r}")
    return x


def _vec3(x):
    if not isinstance(x, (list, tuple)) or len(x) != 3:
        raise ConfigError(f"expected a 3-element array, got {x!r}")
    return tuple(_float(v) for v in x)


def _ivec3(x):
    if not isinstance(x, (list, tuple)) or len(x) != 3:
        raise ConfigError(f"expected a 3-element integer array, got {x!r}")
    return tuple(_int(v) for v in x)


def _str(x):
    if not isinstance(x, str):
        raise ConfigError(f"expected a string, got {x!r}")
    return x


def parse_config(doc: dict) -> RunConfig:
    """Validate a JSON document against the schema and all model invariants."""
    top = _take(
        doc,
        "<root>",
        {
            "grid": (True, dict),
            "body": (True, dict),
            "pressure": (True, dict),
            "viscosity": (True, dict),
            "regularization": (False, dict),
            "fluid_mass": (True, _float),
            "initial": (False, dict),
            "t_end": (False, _float),
            "control": (False, dict),
            "output": (False, dict),
            "omega_limit": (False, dict),
            "steady": (False, dict),
            "study": (False, dict),
            "energy_margin_coeff": (False, _float),
        },
    )

    g = _take(
        top["grid"],
        "grid",
        {"extents": (True, _vec3), "cells": (True, _ivec3), "offset": (False, _vec3)},
    )
    try:
        grid = CavityGrid(extents=g["extents"], counts=g["cells"], offset=g.get("offset", (0.0, 0.0, 0.0)))
    except Exception as exc:
        raise ConfigError(f"grid: {exc}") from exc

    b = _take(
        top["body"],
        "body",
        {"mass": (True, _float), "inertia": (False, list), "inertia_diag": (False, _vec3)},
    )
    if ("inertia" in b) == ("inertia_diag" in b):
        raise ConfigError("body: give exactly one of 'inertia' (3x3) or 'inertia_diag' (3)")
    if "inertia_diag" in b:
        inertia = np.diag(b["inertia_diag"])
    else:
        inertia = np.asarray(b["inertia"], dtype=float)
        if inertia.shape != (3, 3):
            raise ConfigError("body.inertia must be a 3x3 nested array")
    try:
        body = BodySpec(mass=b["mass"], inertia=inertia, cavity=grid)
    except Exception as exc:
        raise ConfigError(f"body: {exc}") from exc

    p = _take(top["pressure"], "pressure", {"a": (True, _float), "gamma": (True, _float)})
    try:
        law = PressureLaw(a=p["a"], gamma=p["gamma"])
    except Exception as exc:
        raise ConfigError(f"pressure: {exc}") from exc
    if law.outside_weak_class:
        warnings.warn(
            f"gamma = {law.gamma} <= 1.5: outside the exponent range this package's "
            "long-run certificates are designed around",
            stacklevel=2,
        )

    v = _take(top["viscosity"], "viscosity", {"mu": (True, _float), "lambda": (False, _float)})
    try:
        visc = ViscositySpec(mu=v["mu"], lam=v.get("lambda", 0.0))
    except Exception as exc:
        raise ConfigError(f"viscosity: {exc}") from exc

    r = _take(
        top.get("regularization", {}),
        "regularization",
        {"d": (False, _float), "b": (False, _float), "beta": (False, _float)},
    )
    try:
        reg = RegularizationSpec(d=r.get("d", 0.0), b=r.get("b", 0.0), beta=r.get("beta", 8.0))
        reg.validate_with(law)
    except Exception as exc:
        raise ConfigError(f"regularization: {exc}") from exc

    fluid_mass = top["fluid_mass"]
    if not (fluid_mass > 0.0) or not math.isfinite(fluid_mass):
        raise ConfigError(f"fluid_mass must be positive and finite, got {fluid_mass}")

    ini = _take(
        top.get("initial", {"kind": "rest"}),
        "initial",
        {
            "kind": (True, _str),
            "omega0": (False, _vec3),
            "epsilon": (False, _float),
            "seed": (False, _int),
            "perturbation_cells": (False, _ivec3),
            "zero_angular_momentum": (False, _bool),
            "path": (False, _str),
        },
    )
    kind = ini["kind"]
    if kind not in ("rest", "rigid_rotation", "file"):
        raise ConfigError(f"initial.kind must be rest, rigid_rotation, or file, got {kind!r}")
    if kind == "file" and "path" not in ini:
        raise ConfigError("initial.kind = file requires initial.path")
    initial = InitialSpec(
        kind=kind,
        omega0=ini.get("omega0", (0.0, 0.0, 0.0)),
        epsilon=ini.get("epsilon", 0.0),
        seed=ini.get("seed", 0),
        perturbation_cells=ini.get("perturbation_cells"),
        zero_angular_momentum=ini.get("zero_angular_momentum", False),
        path=ini.get("path"),
    )
    if initial.epsilon < 0.0:
        raise ConfigError("initial.epsilon must be >= 0")
    if initial.zero_angular_momentum and any(w != 0.0 for w in initial.omega0):
        raise ConfigError("initial.zero_angular_momentum requires omega0 = 0")
    if initial.perturbation_cells is not None:
        for nf, nc in zip(grid.counts, initial.perturbation_cells):
            if nc < 1 or nf % nc != 0:
                raise ConfigError(
                    f"initial.perturbation_cells {initial.perturbation_cells} must divide "
                    f"the grid cells {grid.counts}"
                )

    t_end = top.get("t_end", 0.0)
    if t_end < 0.0 or not math.isfinite(t_end):
        raise ConfigError(f"t_end must be >= 0 and finite, got {t_end}")

    c = _take(
        top.get("control", {}),
        "control",
        {"cfl": (False, _float), "dt_max": (False, _float), "rho_min": (False, _float)},
    )
    rho_bar = fluid_mass / grid.volume
    try:
        control = StepControl(
            cfl=c.get("cfl", 0.3),
            dt_max=c.get("dt_max", math.inf),
            rho_min=c.get("rho_min", 1e-12 * rho_bar),
        )
    except Exception as exc:
        raise ConfigError(f"control: {exc}") from exc

    o = _take(
        top.get("output", {}),
        "output",
        {
            "directory": (False, _str),
            "sample_every_steps": (False, _int),
            "snapshot_every_time": (False, _float),
            "checkpoint_every_steps": (False, _int),
        },
    )
    output = OutputSpec(
        directory=o.get("directory"),
        sample_every_steps=o.get("sample_every_steps", 50),
        snapshot_every_time=o.get("snapshot_every_time", 0.0),
        checkpoint_every_steps=o.get("checkpoint_every_steps", 0),
    )
    if output.sample_every_steps < 1:
        raise ConfigError("output.sample_every_steps must be >= 1")
    if output.snapshot_every_time < 0.0 or output.checkpoint_every_steps < 0:
        raise ConfigError("output cadences must be >= 0")

    omega_limit = None
    if "omega_limit" in top:
        ol = _take(top["omega_limit"], "omega_limit", {"window": (False, _int), "tol": (False, _float)})
        omega_limit = OmegaLimitSpec(window=ol.get("window", 5), tol=ol.get("tol", 1e-5))
        if omega_limit.window < 2 or omega_limit.tol <= 0.0:
            raise ConfigError("omega_limit needs window >= 2 and tol > 0")

    steady = None
    if "steady" in top:
        s = _take(
            top["steady"],
            "steady",
            {
                "angular_momentum": (True, _float),
                "axis_index": (False, _int),
                "tol": (False, _float),
                "max_iter": (False, _int),
            },
        )
        steady = SteadySpec(
            angular_momentum=s["angular_momentum"],
            axis_index=s.get("axis_index", 2),
            tol=s.get("tol", 1e-12),
            max_iter=s.get("max_iter", 200),
        )
        if steady.angular_momentum < 0.0:
            raise ConfigError("steady.angular_momentum must be >= 0")
        if steady.axis_index not in (0, 1, 2):
            raise ConfigError("steady.axis_index must be 0, 1, or 2")

    study = None
    if "study" in top:
        st = _take(
            top["study"],
            "study",
            {
                "d_values": (False, list),
                "b_values": (False, list),
                "grid_counts": (False, list),
                "dt_values": (False, list),
            },
        )
        study = StudySpec(
            d_values=tuple(_float(x) for x in st.get("d_values", [])),
            b_values=tuple(_float(x) for x in st.get("b_values", [])),
            grid_counts=tuple(_int(x) for x in st.get("grid_counts", [])),
            dt_values=tuple(_float(x) for x in st.get("dt_values", [])),
        )

    coeff = top.get("energy_margin_coeff", ENERGY_MARGIN_COEFF)
    if not (coeff >= 0.0):
        raise ConfigError("energy_margin_coeff must be >= 0")

    return RunConfig(
        grid=grid,
        body=body,
        law=law,
        visc=visc,
        reg=reg,
        fluid_mass=fluid_mass,
        initial=initial,
        t_end=t_end,
        control=control,
        output=output,
        omega_limit=omega_limit,
        steady=steady,
        study=study,
        energy_margin_coeff=coeff,
    )


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must contain a single JSON object")
    return parse_config(doc)


def serialize_config(cfg: RunConfig) -> dict:
    """Canonical JSON document; parse(serialize(cfg)) reproduces cfg."""
    doc = {
        "grid": {
            "extents": list(cfg.grid.extents),
            "cells": list(cfg.grid.counts),
            "offset": list(cfg.grid.offset),
        },
        "body": {"mass": cfg.body.mass, "inertia": [list(row) for row in cfg.body.inertia]},
        "pressure": {"a": cfg.law.a, "gamma": cfg.law.gamma},
        "viscosity": {"mu": cfg.visc.mu, "lambda": cfg.visc.lam},
        "regularization": {"d": cfg.reg.d, "b": cfg.reg.b, "beta": cfg.reg.beta},
        "fluid_mass": cfg.fluid_mass,
        "initial": {
            "kind": cfg.initial.kind,
            "omega0": list(cfg.initial.omega0),
            "epsilon": cfg.initial.epsilon,
            "seed": cfg.initial.seed,
            "zero_angular_momentum": cfg.initial.zero_angular_momentum,
        },
        "t_end": cfg.t_end,
        "control": {
            "cfl": cfg.control.cfl,
            "dt_max": cfg.control.dt_max,
            "rho_min": cfg.control.rho_min,
        },
        "output": {
            "sample_every_steps": cfg.output.sample_every_steps,
            "snapshot_every_time": cfg.output.snapshot_every_time,
            "checkpoint_every_steps": cfg.output.checkpoint_every_steps,
        },
        "energy_margin_coeff": cfg.energy_margin_coeff,
    }
    if cfg.initial.perturbation_cells is not None:
        doc["initial"]["perturbation_cells"] = list(cfg.initial.perturbation_cells)
    if cfg.initial.path is not None:
        doc["initial"]["path"] = cfg.initial.path
    if cfg.output.directory is not None:
        doc["output"]["directory"] = cfg.output.directory
    if cfg.omega_limit is not None:
        doc["omega_limit"] = {"window": cfg.omega_limit.window, "tol": cfg.omega_limit.tol}
    if cfg.steady is not None:
        doc["steady"] = {
            "angular_momentum": cfg.steady.angular_momentum,
            "axis_index": cfg.steady.axis_index,
            "tol": cfg.steady.tol,
            "max_iter": cfg.steady.max_iter,
        }
    if cfg.study is not None:
        doc["study"] = {
            "d_values": list(cfg.study.d_values),
            "b_values": list(cfg.study.b_values),
            "grid_counts": list(cfg.study.grid_counts),
            "dt_values": list(cfg.study.dt_values),
        }
    return doc


def _canonical_json(doc: dict) -> str:
    def default(o):
        raise ConfigError(f"not JSON-serializable: {o!r}")

    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False, default=default)


def config_hash(cfg: RunConfig) -> bytes:
    """sha256 digest (32 raw bytes) of the canonical configuration."""
    return hashlib.sha256(_canonical_json(serialize_config(cfg)).encode("ascii")).digest()


def init_descriptor_hash(cfg: RunConfig) -> str:
    """Hash of the physical problem posed by the initial data.

    Excludes resolution, regularization, time-step control, and output
    settings so that runs differing only in those remain comparable.
    """
    doc = serialize_config(cfg)
    descriptor = {
        "extents": doc["grid"]["extents"],
        "offset": doc["grid"]["offset"],
        "body": doc["body"],
        "pressure": doc["pressure"],
        "viscosity": doc["viscosity"],
        "fluid_mass": doc["fluid_mass"],
        "initial": doc["initial"],
    }
    return hashlib.sha256(_canonical_json(descriptor).encode("ascii")).hexdigest()


def _perturbation_field(cfg: RunConfig) -> np.ndarray:
    """Deterministic velocity perturbation from the seed (counter-based
    generator), drawn on the perturbation grid and block-replicated onto the
    run grid so refined runs share the same physical initial data."""
    cells = cfg.initial.perturbation_cells or cfg.grid.counts
    gen = np.random.Generator(np.random.Philox(key=cfg.initial.seed))
    du = cfg.initial.epsilon * gen.standard_normal(size=tuple(cells) + (3,))
    for axis in range(3):
        factor = cfg.grid.counts[axis] // cells[axis]
        if factor > 1:
            du = np.repeat(du, factor, axis=axis)
    return du


def _project_zero_impulse(du: np.ndarray, rho: np.ndarray, grid: CavityGrid) -> np.ndarray:
    """Remove the rigid component of a perturbation so its total momentum and
    angular momentum both vanish: subtract xi_p + omega_p x x solving the
    coupled 6x6 moment system."""
    vol = grid.cell_volume
    x = grid.centers
    m_f = float(np.sum(rho)) * vol
    g = first_moment(rho, grid)
    ibar = fluid_inertia(rho, grid)
    p = (rho[..., None] * du).sum(axis=(0, 1, 2)) * vol
    ell = (rho[..., None] * np.cross(x, du)).sum(axis=(0, 1, 2)) * vol

    def s(a):
        return np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])

    k = np.zeros((6, 6))
    k[:3, :3] = m_f * np.eye(3)
    k[:3, 3:] = -s(g)
    k[3:, :3] = s(g)
    k[3:, 3:] = ibar
    sol = np.linalg.solve(k, np.concatenate([p, ell]))
    xi_p, omega_p = sol[:3], sol[3:]
    return du - (np.cross(omega_p, x) + xi_p)


def build_initial_state(cfg: RunConfig) -> CoupledState:
    """Construct the configured initial state with exactly consistent kinematics."""
    grid = cfg.grid
    rho_bar = cfg.rho_bar

    if cfg.initial.kind == "file":
        from .io import checkpoint_read, state_from_checkpoint

        data = checkpoint_read(cfg.initial.path)
        return state_from_checkpoint(data, cfg.body, grid)

    rho = np.full(grid.counts, rho_bar)
    if cfg.initial.kind == "rest":
        fluid = FluidField(rho, np.zeros(grid.counts + (3,)))
        return make_state(fluid, np.zeros(3), 0.0, cfg.body, grid)

    omega0 = np.asarray(cfg.initial.omega0, dtype=float)
    du = _perturbation_field(cfg) if cfg.initial.epsilon > 0.0 else np.zeros(grid.counts + (3,))
    if cfg.initial.zero_angular_momentum and cfg.initial.epsilon > 0.0:
        du = _project_zero_impulse(du, rho, grid)

    # Solve for the body translation that closes the linear-momentum
    # constraint: (m_body + m_fluid) xi0 = -(omega0 x g + sum rho du vol).
    g = first_moment(rho, grid)
    p_pert = (rho[..., None] * du).sum(axis=(0, 1, 2)) * grid.cell_volume
    total_mass = cfg.body.mass + cfg.fluid_mass
    xi0 = -(np.cross(omega0, g) + p_pert) / total_mass

    u0 = np.cross(omega0, grid.centers) + xi0 + du
    fluid = FluidField(rho, rho[..., None] * u0)
    m_fluid = np.cross(grid.centers, fluid.q).sum(axis=(0, 1, 2)) * grid.cell_volume
    m_total = cfg.body.inertia @ omega0 + m_fluid
    return make_state(fluid, m_total, 0.0, cfg.body, grid)


def worker_count(requested: int | None = None) -> int:
    """Worker budget for study fan-out: min(requested, CAVITY_SPIN_THREADS)."""
    env = os.environ.get("CAVITY_SPIN_THREADS")
    cap = None
    if env is not None:
        try:
            cap = max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"CAVITY_SPIN_THREADS must be an integer, got {env!r}") from exc
    if requested is None:
        requested = cap if cap is not None else 1
    return max(1, min(requested, cap) if cap is not None else requested)
