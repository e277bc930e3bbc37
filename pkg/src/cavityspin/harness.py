"""Run orchestration: simulation runs with full telemetry, the steady-state
driver, the regularization/grid/step-size studies, and run-to-run comparison.

Outputs per run directory:

* ``config.json``  canonical configuration (re-parseable)
* ``meta.json``    config hash, initial-data descriptor, derived scales
* ``timeseries.csv``  one diagnostics row per sample cadence
* ``snapshots/snap_######.cspn``  checkpoint-format field snapshots at the
  configured time cadence (times land exactly, so runs are comparable)
* ``checkpoint.cspn`` periodic restart point, ``final.cspn`` final state
* ``summary.json`` final metrics, verdicts, certification flags, output hashes
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from . import io as runio
from .config import (
    RunConfig,
    build_initial_state,
    config_hash,
    init_descriptor_hash,
    serialize_config,
    worker_count,
)
from .core import CavityGrid
from .diagnostics import (
    OmegaLimitSample,
    OmegaLimitVerdict,
    Reference,
    compute_sample,
    omega_limit_detect,
    relative_entropy_total,
    restrict_reference,
)
from .dynamics import (
    RunCounters,
    Workspace,
    cfl_dt,
    make_state,
    simulate,
    spatial_residual,
)
from .errors import ConfigError
from .steady import solve_steady, steady_residual

__all__ = [
    "RunResult",
    "run_simulation",
    "run_steady",
    "study_regularization",
    "study_grid",
    "study_dt",
    "compare_runs",
    "certify_series",
    "fit_order",
]

_FORMAT_VERSION = 1


@dataclass(eq=False)
class RunResult:
    state: object
    counters: RunCounters
    rows: list
    verdict: OmegaLimitVerdict | None
    certification: dict
    directory: str | None


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fit_order(values, params) -> float:
    """Least-squares slope of log(value) against log(1/param): the observed
    convergence order of a refinement ladder."""
    v = np.asarray(values, dtype=float)
    p = np.asarray(params, dtype=float)
    if np.any(v <= 0.0):
        return math.inf  # already at round-off: better than any finite order
    x = np.log(1.0 / p)
    y = np.log(v)
    slope = np.polyfit(x, y, 1)[0]
    return float(-slope)


def certify_series(rows, cfg: RunConfig, steps: int) -> dict:
    """Post-run certification from the emitted series (independent of the
    stepper's own accumulators).

    * mass drift <= 1e-12 relative for d = 0 runs;
    * kinematic constraint residuals <= 1e-12;
    * energy certificate for physical runs (d = b = 0): at every sample,
      energy + cumulative dissipation <= E(0) (1 + C (h + dt)) with the
      frozen margin coefficient C.
    """
    out: dict = {"certifiable": True, "violations": []}
    if not rows:
        return out
    mass0 = rows[0]["mass"]
    mass_drift = max(abs(r["mass"] - mass0) / mass0 for r in rows)
    out["mass_drift"] = mass_drift
    if cfg.reg.d == 0.0 and mass_drift > 1e-12:
        out["violations"].append(f"mass conservation drifted {mass_drift:.3e} > 1e-12")

    c_xi = max(r["constraint_xi"] for r in rows)
    c_m = max(r["constraint_m"] for r in rows)
    out["constraint_xi"] = c_xi
    out["constraint_m"] = c_m
    if max(c_xi, c_m) > 1e-12:
        out["violations"].append(
            f"kinematic constraints drifted (xi {c_xi:.3e}, M {c_m:.3e}) > 1e-12"
        )

    m0 = rows[0]["m_norm"]
    out["m_norm_drift"] = (
        max(abs(r["m_norm"] - m0) for r in rows) / m0 if m0 > 0.0 else 0.0
    )

    if cfg.reg.d == 0.0 and cfg.reg.b == 0.0 and len(rows) > 1 and steps > 0:
        e0 = rows[0]["energy"]
        h = cfg.grid.min_spacing
        dt_typ = (rows[-1]["t"] - rows[0]["t"]) / steps
        budget = e0 * (1.0 + cfg.energy_margin_coeff * (h + dt_typ)) if e0 > 0.0 else 0.0
        cum = 0.0
        worst = -math.inf
        for prev, cur in zip(rows, rows[1:]):
            cum += 0.5 * (cur["t"] - prev["t"]) * (
                prev["dissipation_rate"] + cur["dissipation_rate"]
            )
            worst = max(worst, cur["energy"] + cum - budget)
        out["energy_budget"] = budget
        out["energy_excess"] = worst
        if e0 > 0.0 and worst > 0.0:
            out["violations"].append(
                f"energy certificate violated by {worst:.3e} over budget {budget:.6e}"
            )

    out["certifiable"] = not out["violations"]
    return out


def run_simulation(cfg: RunConfig, directory=None, resume=None) -> RunResult:
    """Run one configured simulation with full telemetry.

    ``directory`` overrides the configured output directory (``None`` and no
    configured directory means in-memory only).  ``resume`` restarts from a
    checkpoint written by the same configuration; the subsequent series is
    bit-identical to an uninterrupted run.
    """
    grid = cfg.grid
    ws = Workspace(grid)
    rho_bar = cfg.rho_bar
    chash = config_hash(cfg)

    counters = RunCounters()
    if resume is not None:
        data = runio.checkpoint_read(resume, expected_hash=chash)
        state = runio.state_from_checkpoint(data, cfg.body, grid)
        counters = RunCounters(
            steps=data.step,
            floor_activations=data.floor_activations,
            cum_dissipation=data.cum_dissipation,
        )
    else:
        state = build_initial_state(cfg)

    out_dir = directory if directory is not None else cfg.output.directory
    writer = None
    snap_dir = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_json(os.path.join(out_dir, "config.json"), serialize_config(cfg))
        _write_json(
            os.path.join(out_dir, "meta.json"),
            {
                "format_version": _FORMAT_VERSION,
                "config_hash": chash.hex(),
                "init_descriptor": init_descriptor_hash(cfg),
                "rho_bar": rho_bar,
                "grid_cells": list(grid.counts),
                "resumed_from_step": counters.steps if resume is not None else None,
            },
        )
        writer = runio.TimeseriesWriter(os.path.join(out_dir, "timeseries.csv"))
        if cfg.output.snapshot_every_time > 0.0:
            snap_dir = os.path.join(out_dir, "snapshots")
            os.makedirs(snap_dir, exist_ok=True)

    marks: list[float] = []
    if cfg.output.snapshot_every_time > 0.0:
        k = 0
        while k * cfg.output.snapshot_every_time <= cfg.t_end * (1.0 + 1e-12):
            marks.append(k * cfg.output.snapshot_every_time)
            k += 1

    rows: list[dict] = []
    window = deque(maxlen=cfg.omega_limit.window if cfg.omega_limit else 1)
    eps_t = 1e-12 * max(cfg.t_end, 1.0)
    mark_state = {"idx": 0}
    if counters.steps > 0:
        # Resumed: snapshots up to the checkpoint time were already written.
        while mark_state["idx"] < len(marks) and marks[mark_state["idx"]] <= state.t + eps_t:
            mark_state["idx"] += 1

    def emit(s, cnt):
        at_end = cfg.t_end - s.t <= eps_t
        sampled = cnt.steps == 0 or cnt.steps % cfg.output.sample_every_steps == 0 or at_end
        if sampled:
            sample = compute_sample(s, cfg.body, cfg.law, cfg.visc, cfg.reg, rho_bar, ws)
            row = {
                "t": sample.t,
                "mass": sample.mass,
                "energy": sample.energy,
                "dissipation_rate": sample.dissipation_rate,
                "m_norm": sample.m_norm,
                "v_l2": sample.v_l2,
                "rho_dev_l2": sample.rho_dev_l2,
                "constraint_xi": sample.constraint_xi,
                "constraint_m": sample.constraint_m,
            }
            rows.append(row)
            if writer is not None:
                writer.write(sample)
            if cfg.omega_limit is not None:
                window.append(
                    OmegaLimitSample(
                        t=s.t,
                        v_l2=sample.v_l2,
                        rho=s.fluid.rho.copy(),
                        omega=s.omega.copy(),
                        xi=s.xi.copy(),
                    )
                )
        idx = mark_state["idx"]
        while idx < len(marks) and marks[idx] <= s.t + eps_t:
            if snap_dir is not None:
                runio.checkpoint_write(
                    s,
                    os.path.join(snap_dir, f"snap_{idx:06d}.cspn"),
                    config_hash=chash,
                    step=cnt.steps,
                    floor_activations=cnt.floor_activations,
                    cum_dissipation=cnt.cum_dissipation,
                )
            idx += 1
        mark_state["idx"] = idx
        if (
            out_dir is not None
            and cfg.output.checkpoint_every_steps > 0
            and cnt.steps > 0
            and cnt.steps % cfg.output.checkpoint_every_steps == 0
        ):
            runio.checkpoint_write(
                s,
                os.path.join(out_dir, "checkpoint.cspn"),
                config_hash=chash,
                step=cnt.steps,
                floor_activations=cnt.floor_activations,
                cum_dissipation=cnt.cum_dissipation,
            )

    try:
        state, counters = simulate(
            state,
            cfg.t_end,
            cfg.body,
            cfg.law,
            cfg.visc,
            cfg.reg,
            cfg.control,
            sink=emit,
            sample_every=1,
            ws=ws,
            counters=counters,
            land_times=marks,
        )
    finally:
        if writer is not None:
            writer.close()

    verdict = None
    if cfg.omega_limit is not None:
        verdict = omega_limit_detect(
            list(window), cfg.omega_limit.window, cfg.omega_limit.tol, grid, rho_bar
        )

    certification = certify_series(rows, cfg, counters.steps)
    certification["floor_activations"] = counters.floor_activations
    if counters.floor_activations > 0:
        certification["certifiable"] = False
        certification.setdefault("flags", []).append(
            "positivity floor activated; run not certifiable"
        )

    if out_dir is not None:
        runio.checkpoint_write(
            state,
            os.path.join(out_dir, "final.cspn"),
            config_hash=chash,
            step=counters.steps,
            floor_activations=counters.floor_activations,
            cum_dissipation=counters.cum_dissipation,
        )
        summary = {
            "steps": counters.steps,
            "floor_activations": counters.floor_activations,
            "cum_dissipation": counters.cum_dissipation,
            "final_t": state.t,
            "certification": certification,
            "omega_limit": _verdict_doc(verdict),
            "hashes": {
                "timeseries.csv": _sha256_file(os.path.join(out_dir, "timeseries.csv")),
                "final.cspn": _sha256_file(os.path.join(out_dir, "final.cspn")),
            },
        }
        _write_json(os.path.join(out_dir, "summary.json"), summary)

    return RunResult(
        state=state,
        counters=counters,
        rows=rows,
        verdict=verdict,
        certification=certification,
        directory=out_dir,
    )


def _verdict_doc(verdict: OmegaLimitVerdict | None):
    if verdict is None:
        return None
    return {
        "converged": verdict.converged,
        "score": None if math.isinf(verdict.score) else verdict.score,
        "tol": verdict.tol,
        "window": verdict.window,
        "band_ok": verdict.band_ok,
        "limit_omega": None if verdict.limit_omega is None else list(verdict.limit_omega),
        "limit_xi": None if verdict.limit_xi is None else list(verdict.limit_xi),
    }


def run_steady(cfg: RunConfig, directory=None):
    """Solve the configured steady state and evaluate its residual report.

    Returns ``(steady_state, report, passed)`` where ``passed`` means every
    report entry sits within ten times the solver tolerance (the solver's own
    guarantee for a converged state).
    """
    if cfg.steady is None:
        raise ConfigError("configuration has no 'steady' section")
    s = solve_steady(
        cfg.body,
        cfg.law,
        cfg.grid,
        cfg.fluid_mass,
        cfg.steady.angular_momentum,
        cfg.steady.axis_index,
        tol=cfg.steady.tol,
        max_iter=cfg.steady.max_iter,
    )
    report = steady_residual(
        s, cfg.body, cfg.law, cfg.grid, cfg.fluid_mass, cfg.steady.angular_momentum, cfg.visc
    )
    threshold = 10.0 * cfg.steady.tol
    passed = report.max_entry() <= threshold
    out_dir = directory if directory is not None else cfg.output.directory
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        doc = {
            "omega": list(s.omega),
            "xi": list(s.xi),
            "profile_constant": s.c,
            "axis_index": s.axis_index,
            "residuals": report.entries(),
            "weak_form": report.weak_form,
            "pass_threshold": threshold,
            "passed": passed,
        }
        _write_json(os.path.join(out_dir, "steady.json"), doc)
        state = _steady_to_state(s, cfg)
        runio.snapshot_export(state, cfg.grid, os.path.join(out_dir, "steady_fields.csv"), "csv")
    return s, report, passed


def _steady_to_state(s, cfg: RunConfig):
    from .core import FluidField

    u = s.velocity(cfg.grid)
    fluid = FluidField(s.rho.copy(), s.rho[..., None] * u)
    m_fluid = np.cross(cfg.grid.centers, fluid.q).sum(axis=(0, 1, 2)) * cfg.grid.cell_volume
    m = cfg.body.inertia @ s.omega + m_fluid
    return make_state(fluid, m, 0.0, cfg.body, cfg.grid)


def _final_state_of(cfg: RunConfig):
    res = run_simulation(dc_replace(cfg, output=dc_replace(cfg.output, directory=None)))
    return res.state


def study_regularization(cfg: RunConfig, kind: str) -> dict:
    """Vanishing-regularization study: run a decreasing ladder of d (or b)
    values and measure the relative-entropy distance of each final state to
    the unregularized reference at the shared end time.

    Distances must be monotone non-increasing (within a round-off floor) for
    the study to pass.
    """
    if cfg.study is None:
        raise ConfigError("configuration has no 'study' section")
    values = cfg.study.d_values if kind == "d" else cfg.study.b_values
    if len(values) < 3:
        raise ConfigError(f"study needs at least 3 {kind}-values, got {len(values)}")
    if any(v <= 0.0 for v in values) or any(
        a <= b for a, b in zip(values, values[1:])
    ):
        raise ConfigError(f"{kind}-values must be positive and strictly decreasing")

    from .core import RegularizationSpec

    def reg_for(v):
        if kind == "d":
            return RegularizationSpec(d=v, b=cfg.reg.b, beta=cfg.reg.beta)
        return RegularizationSpec(d=0.0, b=v, beta=cfg.reg.beta)

    base = dc_replace(cfg, reg=RegularizationSpec(d=0.0, b=0.0, beta=cfg.reg.beta))
    configs = [base] + [dc_replace(cfg, reg=reg_for(v)) for v in values]

    workers = worker_count(len(configs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            states = list(pool.map(_final_state_of, configs))
    else:
        states = [_final_state_of(c) for c in configs]
    ref_state, rest = states[0], states[1:]

    ref = Reference(
        r=ref_state.fluid.rho,
        u=ref_state.fluid.velocity(),
        omega=ref_state.omega,
        xi=ref_state.xi,
    )
    distances = [
        relative_entropy_total(st, ref, cfg.law, cfg.grid, cfg.body) for st in rest
    ]
    orders = []
    for (v0, d0), (v1, d1) in zip(zip(values, distances), zip(values[1:], distances[1:])):
        if d0 > 0.0 and d1 > 0.0:
            orders.append(math.log(d0 / d1) / math.log(v0 / v1))
        else:
            orders.append(math.inf)
    floor = 1e-9 * max(distances) + 1e-300
    monotone = all(d1 <= d0 * (1.0 + 1e-9) + floor for d0, d1 in zip(distances, distances[1:]))
    return {
        "kind": kind,
        "values": list(values),
        "distances": distances,
        "orders": orders,
        "monotone": monotone,
        "t_end": cfg.t_end,
    }


def steady_tendency_maxnorm(cfg: RunConfig, counts: tuple[int, int, int]):
    """Max-norm spatial tendency of the solved steady state on one grid."""
    grid = CavityGrid(extents=cfg.grid.extents, counts=counts, offset=cfg.grid.offset)
    body = dc_replace(cfg.body, cavity=grid)
    if cfg.steady is None:
        raise ConfigError("grid study needs a 'steady' section")
    s = solve_steady(
        body,
        cfg.law,
        grid,
        cfg.fluid_mass,
        cfg.steady.angular_momentum,
        cfg.steady.axis_index,
        tol=cfg.steady.tol,
        max_iter=cfg.steady.max_iter,
    )
    sub = dc_replace(cfg, grid=grid, body=body)
    state = _steady_to_state(s, sub)
    tend = spatial_residual(state, body, cfg.law, cfg.visc, cfg.reg, cfg.control.rho_min)
    return float(np.max(np.abs(tend.drho))), float(np.max(np.abs(tend.dq)))


def study_grid(cfg: RunConfig) -> dict:
    """Grid-refinement study: the steady state must be discretely steady at
    order >= 1.8 in the max norm of the spatial tendency.

    A tendency ladder that already sits at the round-off floor (flux
    cancellation noise, which scales like eps * rate / h) counts as converged:
    fitting a slope to round-off noise would be meaningless.
    """
    if cfg.study is None or len(cfg.study.grid_counts) < 3:
        raise ConfigError("grid study needs study.grid_counts with at least 3 entries")
    counts = list(cfg.study.grid_counts)
    res = [steady_tendency_maxnorm(cfg, (n, n, n)) for n in counts]
    h = [cfg.grid.extents[0] / n for n in counts]
    rho_bar = cfg.rho_bar
    c_s = math.sqrt(cfg.law.a * cfg.law.gamma * rho_bar ** (cfg.law.gamma - 1.0))
    h_min = min(h)
    floor_rho = 100.0 * np.finfo(float).eps * rho_bar * c_s / h_min
    floor_q = 100.0 * np.finfo(float).eps * cfg.law.a * rho_bar**cfg.law.gamma / h_min

    def ladder_order(values, floor):
        if max(values) <= floor:
            return math.inf
        return fit_order(values, h)

    rho_order = ladder_order([r[0] for r in res], floor_rho)
    q_order = ladder_order([r[1] for r in res], floor_q)
    return {
        "kind": "grid",
        "counts": counts,
        "drho_max": [r[0] for r in res],
        "dq_max": [r[1] for r in res],
        "rho_order": rho_order,
        "q_order": q_order,
        "passed": rho_order >= 1.8 and q_order >= 1.8,
    }


def _mnorm_drift_run(cfg: RunConfig, dt: float) -> float:
    ctrl = dc_replace(cfg.control, cfl=1.0, dt_max=dt)
    state = build_initial_state(cfg)
    ws = Workspace(cfg.grid)
    bound = cfl_dt(state, cfg.body, cfg.law, cfg.visc, cfg.reg, cfg.control, ws)
    if dt > bound / cfg.control.cfl:
        raise ConfigError(
            f"dt study value {dt} exceeds the stability bound {bound / cfg.control.cfl:.3e}"
        )
    m0 = float(np.linalg.norm(state.M))
    if m0 == 0.0:
        raise ConfigError("dt study needs nonzero initial angular momentum")
    worst = {"v": 0.0}

    def track(s, cnt):
        worst["v"] = max(worst["v"], abs(float(np.linalg.norm(s.M)) - m0) / m0)

    simulate(state, cfg.t_end, cfg.body, cfg.law, cfg.visc, cfg.reg, ctrl, sink=track, ws=ws)
    return worst["v"]


def study_dt(cfg: RunConfig) -> dict:
    """Step-size study: |M| may drift only at the integrator's order (>= 1.8)."""
    if cfg.study is None or len(cfg.study.dt_values) < 3:
        raise ConfigError("dt study needs study.dt_values with at least 3 entries")
    dts = list(cfg.study.dt_values)
    if any(a <= b for a, b in zip(dts, dts[1:])):
        raise ConfigError("dt_values must be strictly decreasing")
    drifts = [_mnorm_drift_run(cfg, dt) for dt in dts]
    order = fit_order(drifts, dts)
    return {
        "kind": "dt",
        "dt_values": dts,
        "drifts": drifts,
        "order": order,
        "passed": order >= 1.8,
    }


def _load_run(directory):
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise ConfigError(f"{directory} is not a run directory (no meta.json)")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    from .config import load_config

    cfg = load_config(os.path.join(directory, "config.json"))
    snaps = {}
    snap_dir = os.path.join(directory, "snapshots")
    if os.path.isdir(snap_dir):
        for name in sorted(os.listdir(snap_dir)):
            if name.endswith(".cspn"):
                data = runio.checkpoint_read(os.path.join(snap_dir, name))
                snaps[round(data.t, 12)] = data
    return meta, cfg, snaps


def compare_runs(dir_a, dir_b, envelope=None) -> dict:
    """Relative-entropy distance between two runs at matched snapshot times.

    Both runs must pose the same physical problem (identical initial-data
    descriptor).  When the grids differ by an integer factor the finer run is
    conservatively restricted onto the coarser grid.  A Gronwall-style
    envelope c1 * exp(c2 t) is fitted to the positive distances; when an
    explicit ``envelope=(c1, c2, floor)`` is supplied, the result flags
    whether any distance exceeds c1 exp(c2 t) distance(0) + floor.
    """
    meta_a, cfg_a, snaps_a = _load_run(dir_a)
    meta_b, cfg_b, snaps_b = _load_run(dir_b)
    if meta_a["init_descriptor"] != meta_b["init_descriptor"]:
        raise ConfigError("runs pose different physical problems (descriptor mismatch)")
    times = sorted(set(snaps_a) & set(snaps_b))
    if not times:
        raise ConfigError("runs share no snapshot times; configure snapshot_every_time")

    na, nb = cfg_a.grid.ncells, cfg_b.grid.ncells
    if na <= nb:
        coarse_cfg, coarse_snaps, fine_cfg, fine_snaps = cfg_a, snaps_a, cfg_b, snaps_b
    else:
        coarse_cfg, coarse_snaps, fine_cfg, fine_snaps = cfg_b, snaps_b, cfg_a, snaps_a

    rows = []
    for t in times:
        ca = coarse_snaps[t]
        fb = fine_snaps[t]
        coarse_state = runio.state_from_checkpoint(ca, coarse_cfg.body, coarse_cfg.grid)
        fine_state = runio.state_from_checkpoint(fb, fine_cfg.body, fine_cfg.grid)
        if fine_cfg.grid.counts == coarse_cfg.grid.counts:
            ref = Reference(
                r=fine_state.fluid.rho,
                u=fine_state.fluid.velocity(),
                omega=fine_state.omega,
                xi=fine_state.xi,
            )
        else:
            ref = restrict_reference(fine_state, fine_cfg.grid, coarse_cfg.grid)
        dist = relative_entropy_total(
            coarse_state, ref, coarse_cfg.law, coarse_cfg.grid, coarse_cfg.body
        )
        rows.append({"t": t, "distance": dist})

    positive = [(r["t"], r["distance"]) for r in rows if r["distance"] > 0.0]
    fit = None
    if len(positive) >= 2:
        ts = np.array([p[0] for p in positive])
        ds = np.array([p[1] for p in positive])
        c2, logc1 = np.polyfit(ts, np.log(ds), 1)
        fit = {"c1": float(np.exp(logc1)), "c2": float(c2)}

    flagged = False
    if envelope is not None:
        c1, c2, floor = envelope
        d0 = rows[0]["distance"]
        for r in rows:
            if r["distance"] > c1 * math.exp(c2 * r["t"]) * d0 + floor:
                flagged = True
                break
    return {
        "times": [r["t"] for r in rows],
        "distances": [r["distance"] for r in rows],
        "fit": fit,
        "flagged": flagged,
        "distance0": rows[0]["distance"],
    }
