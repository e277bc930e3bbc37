"""Command-line interface.

Subcommands::

    cavityspin simulate <config> [--output DIR] [--resume CKPT]
    cavityspin steady   <config> [--output DIR]
    cavityspin study    <config> --kind {d,b,grid,dt}
    cavityspin compare  <dirA> <dirB> [--envelope-c1 V --envelope-c2 V [--envelope-floor V]]
    cavityspin check    <config>

Exit codes: 0 success, 1 usage or configuration error, 2 certified-invariant
violation or non-convergence, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings

import numpy as np

from .config import load_config, worker_count
from .dynamics import Workspace, cfl_dt
from .config import build_initial_state
from .errors import (
    CavitySpinError,
    CheckpointError,
    ConfigError,
    ConvergenceError,
    DomainError,
    InfeasibleProfileError,
    NumericsError,
)
from .harness import compare_runs, run_simulation, run_steady, study_dt, study_grid, study_regularization

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VIOLATION = 2
EXIT_NUMERICS = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="cavityspin", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a configured simulation")
    sim.add_argument("config")
    sim.add_argument("--output", default=None, help="override the output directory")
    sim.add_argument("--resume", default=None, help="restart from a checkpoint")

    st = sub.add_parser("steady", help="solve the configured steady rotation")
    st.add_argument("config")
    st.add_argument("--output", default=None)

    study = sub.add_parser("study", help="run a convergence study")
    study.add_argument("config")
    study.add_argument("--kind", required=True, choices=["d", "b", "grid", "dt"])

    cmp_ = sub.add_parser("compare", help="relative-entropy distance between two runs")
    cmp_.add_argument("dir_a")
    cmp_.add_argument("dir_b")
    cmp_.add_argument("--envelope-c1", type=float, default=None)
    cmp_.add_argument("--envelope-c2", type=float, default=None)
    cmp_.add_argument("--envelope-floor", type=float, default=0.0)

    chk = sub.add_parser("check", help="validate a configuration without computing")
    chk.add_argument("config")
    return p


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    result = run_simulation(cfg, directory=args.output, resume=args.resume)
    cert = result.certification
    last = result.rows[-1] if result.rows else {}
    print(f"steps: {result.counters.steps}")
    print(f"final t: {result.state.t!r}")
    if last:
        print(f"final mass: {last['mass']!r}  energy: {last['energy']!r}")
        print(f"final |M|: {last['m_norm']!r}  |v|_2: {last['v_l2']!r}")
        print(f"mass drift: {cert.get('mass_drift', 0.0):.3e}")
        print(
            f"constraint residuals: xi {cert.get('constraint_xi', 0.0):.3e}, "
            f"M {cert.get('constraint_m', 0.0):.3e}"
        )
    if result.counters.floor_activations:
        print(f"positivity floor activations: {result.counters.floor_activations} (not certifiable)")
    if result.verdict is not None:
        v = result.verdict
        if v.converged:
            kind = "uniform rest" if np.linalg.norm(v.limit_omega) <= v.tol else "rigid rotation"
            print(
                f"long-time verdict: converged to {kind} "
                f"(score {v.score:.3e} <= tol {v.tol:.1e}; density band ok: {v.band_ok})"
            )
        else:
            print(f"long-time verdict: not converged (score {v.score:.3e} > tol {v.tol:.1e})")
    for violation in cert.get("violations", []):
        print(f"VIOLATION: {violation}", file=sys.stderr)
    return EXIT_OK if not cert.get("violations") else EXIT_VIOLATION


def _cmd_steady(args) -> int:
    cfg = load_config(args.config)
    state, report, passed = run_steady(cfg, directory=args.output)
    print(f"omega: {list(state.omega)}")
    print(f"xi: {list(state.xi)}")
    print(f"profile constant: {state.c!r}")
    for name, value in report.entries().items():
        print(f"residual {name}: {value:.3e}")
    for name, value in report.weak_form.items():
        print(f"weak-form {name}: {value:.3e} (discretization-limited)")
    if not passed:
        print("steady residuals exceed tolerance", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def _cmd_study(args) -> int:
    cfg = load_config(args.config)
    print(f"workers: {worker_count(None)}")
    if args.kind in ("d", "b"):
        table = study_regularization(cfg, args.kind)
        print(f"{args.kind}-value,distance,order")
        orders = table["orders"] + [float("nan")]
        for v, dist, order in zip(table["values"], table["distances"], orders):
            print(f"{v!r},{dist!r},{order!r}")
        if not table["monotone"]:
            print("distances are not monotone non-increasing", file=sys.stderr)
            return EXIT_VIOLATION
        return EXIT_OK
    if args.kind == "grid":
        table = study_grid(cfg)
        print("cells,drho_max,dq_max")
        for n, dr, dq in zip(table["counts"], table["drho_max"], table["dq_max"]):
            print(f"{n},{dr!r},{dq!r}")
        print(f"fitted orders: rho {table['rho_order']:.3f}, q {table['q_order']:.3f}")
        return EXIT_OK if table["passed"] else EXIT_VIOLATION
    table = study_dt(cfg)
    print("dt,m_norm_drift")
    for dt, drift in zip(table["dt_values"], table["drifts"]):
        print(f"{dt!r},{drift!r}")
    print(f"fitted order: {table['order']:.3f}")
    return EXIT_OK if table["passed"] else EXIT_VIOLATION


def _cmd_compare(args) -> int:
    envelope = None
    if (args.envelope_c1 is None) != (args.envelope_c2 is None):
        raise ConfigError("--envelope-c1 and --envelope-c2 must be given together")
    if args.envelope_c1 is not None:
        envelope = (args.envelope_c1, args.envelope_c2, args.envelope_floor)
    table = compare_runs(args.dir_a, args.dir_b, envelope=envelope)
    print("t,distance")
    for t, d in zip(table["times"], table["distances"]):
        print(f"{t!r},{d!r}")
    if table["fit"] is not None:
        print(f"fitted envelope: c1 {table['fit']['c1']!r}, c2 {table['fit']['c2']!r}")
    if table["flagged"]:
        print("flag: distance exceeds the configured envelope", file=sys.stderr)
    return EXIT_OK


def _cmd_check(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cfg = load_config(args.config)
        state = build_initial_state(cfg)
    for w in caught:
        print(f"warning: {w.message}")
    ws = Workspace(cfg.grid)
    dt = cfl_dt(state, cfg.body, cfg.law, cfg.visc, cfg.reg, cfg.control, ws)
    print(f"grid: {cfg.grid.counts}, cells {cfg.grid.ncells}, h_min {cfg.grid.min_spacing!r}")
    print(f"rho_bar: {cfg.rho_bar!r}")
    print(f"initial |M|: {float(np.linalg.norm(state.M))!r}")
    print(f"initial dt bound: {dt!r}")
    if dt > 0:
        print(f"estimated steps to t_end: {int(cfg.t_end / dt) if cfg.t_end > 0 else 0}")
    print("config ok")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "steady":
            return _cmd_steady(args)
        if args.command == "study":
            return _cmd_study(args)
        if args.command == "compare":
            return _cmd_compare(args)
        return _cmd_check(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, InfeasibleProfileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, ConvergenceError) and exc.history:
            tail = ", ".join(f"{e:.3e}" for e in exc.history[-5:])
            print(f"residual history (last 5): {tail}", file=sys.stderr)
        return EXIT_VIOLATION
    except (NumericsError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except CavitySpinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
