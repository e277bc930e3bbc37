"""Bit-exact persistence: time series, checkpoints, and field snapshots.

Formats (all little-endian, documented for interoperability):

* Time series: plain CSV with a fixed header; floats are written with
  Python's shortest round-trip representation, so parsing a written file
  reproduces every value bit-exactly.  The optional relative-entropy column
  is empty when no reference is configured.

* Checkpoint (magic ``CSPN``, version 1): binary layout

  ====================  =======================================
  magic                 4 bytes ``b"CSPN"``
  version               u32
  config hash           32 raw bytes (sha256 of the canonical config)
  n1, n2, n3            u32 each
  step                  u64
  floor activations     u64
  t                     f64
  M                     3 x f64
  accumulated diss.     f64
  rho                   n1*n2*n3 f64, x-fastest
  qx, qy, qz            three blocks, each n1*n2*n3 f64, x-fastest
  ====================  =======================================

  "x-fastest" means the first grid index varies fastest (Fortran flattening
  of an array indexed ``[i, j, k]``).  Read restores the state bit-exactly;
  magic, version, size, or hash mismatches are refused with an explanation.

* Snapshot: per-cell CSV (i, j, k, x, y, z, rho, ux..uz, vx..vz) in the same
  x-fastest order, or ``raw`` binary identical to the checkpoint field blocks.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .core import CavityGrid, CoupledState, FluidField
from .diagnostics import DiagnosticsSample
from .errors import CheckpointError

__all__ = [
    "TIMESERIES_COLUMNS",
    "TimeseriesWriter",
    "read_timeseries",
    "CheckpointData",
    "checkpoint_write",
    "checkpoint_read",
    "state_from_checkpoint",
    "snapshot_export",
]

TIMESERIES_COLUMNS = (
    "t",
    "mass",
    "energy",
    "dissipation_rate",
    "m_norm",
    "omega_x",
    "omega_y",
    "omega_z",
    "xi_x",
    "xi_y",
    "xi_z",
    "v_l2",
    "rho_dev_l2",
    "constraint_xi",
    "constraint_m",
    "rel_entropy",
)

_MAGIC = b"CSPN"
_VERSION = 1
_HEADER = struct.Struct("<4sI32sIIIQQd3dd")


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


class TimeseriesWriter:
    """Append-only CSV sink; one complete row per write, flushed immediately,
    so an interrupted run leaves exactly the rows already emitted."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._fh = open(self.path, "w", encoding="ascii", newline="")
        self._fh.write(",".join(TIMESERIES_COLUMNS) + "\n")
        self._fh.flush()

    def write(self, sample: DiagnosticsSample) -> None:
        row = [
            _fmt(sample.t),
            _fmt(sample.mass),
            _fmt(sample.energy),
            _fmt(sample.dissipation_rate),
            _fmt(sample.m_norm),
            _fmt(sample.omega[0]),
            _fmt(sample.omega[1]),
            _fmt(sample.omega[2]),
            _fmt(sample.xi[0]),
            _fmt(sample.xi[1]),
            _fmt(sample.xi[2]),
            _fmt(sample.v_l2),
            _fmt(sample.rho_dev_l2),
            _fmt(sample.constraint_xi),
            _fmt(sample.constraint_m),
            _fmt(sample.rel_entropy),
        ]
        self._fh.write(",".join(row) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_timeseries(path) -> list[dict]:
    """Parse a written time series back to full float precision.

    Returns one dict per row keyed by column name; the empty relative-entropy
    field parses to None.
    """
    rows: list[dict] = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != TIMESERIES_COLUMNS:
            raise CheckpointError(f"unexpected time-series header in {path}")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            rows.append(
                {
                    k: (None if v == "" else float(v))
                    for k, v in zip(TIMESERIES_COLUMNS, parts)
                }
            )
    return rows


@dataclass(eq=False)
class CheckpointData:
    """Everything needed to resume a run bit-exactly."""

    rho: np.ndarray
    q: np.ndarray
    M: np.ndarray
    t: float
    step: int
    floor_activations: int
    cum_dissipation: float
    config_hash: bytes

    def counts(self) -> tuple[int, int, int]:
        return self.rho.shape


def checkpoint_write(
    state: CoupledState,
    path,
    config_hash: bytes = b"\x00" * 32,
    step: int = 0,
    floor_activations: int = 0,
    cum_dissipation: float = 0.0,
) -> None:
    """Write a checkpoint atomically (temp file + rename)."""
    if len(config_hash) != 32:
        raise CheckpointError("config hash must be 32 raw bytes")
    n = state.fluid.rho.shape
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        config_hash,
        n[0],
        n[1],
        n[2],
        step,
        floor_activations,
        float(state.t),
        float(state.M[0]),
        float(state.M[1]),
        float(state.M[2]),
        float(cum_dissipation),
    )
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(state.fluid.rho.flatten(order="F"), dtype="<f8").tobytes())
        for comp in range(3):
            fh.write(
                np.ascontiguousarray(
                    state.fluid.q[..., comp].flatten(order="F"), dtype="<f8"
                ).tobytes()
            )
    os.replace(tmp, os.fspath(path))


def checkpoint_read(path, expected_hash: bytes | None = None) -> CheckpointData:
    """Read a checkpoint, refusing with an explanation on any mismatch."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"checkpoint {path} is truncated (no complete header)")
    (
        magic,
        version,
        config_hash,
        n1,
        n2,
        n3,
        step,
        floors,
        t,
        m0,
        m1,
        m2,
        cum_diss,
    ) = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise CheckpointError(f"checkpoint {path} has wrong magic bytes {magic!r}")
    if version != _VERSION:
        raise CheckpointError(f"checkpoint {path} has unsupported version {version}")
    if expected_hash is not None and config_hash != expected_hash:
        raise CheckpointError(
            f"checkpoint {path} was written by a different configuration "
            "(config hash mismatch); refusing to restart from it"
        )
    ncells = n1 * n2 * n3
    expected_size = _HEADER.size + 8 * ncells * 4
    if len(raw) != expected_size:
        raise CheckpointError(
            f"checkpoint {path} is truncated or padded: {len(raw)} bytes, expected {expected_size}"
        )
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    rho = body[:ncells].reshape((n1, n2, n3), order="F").copy()
    q = np.empty((n1, n2, n3, 3))
    for comp in range(3):
        block = body[(1 + comp) * ncells : (2 + comp) * ncells]
        q[..., comp] = block.reshape((n1, n2, n3), order="F")
    return CheckpointData(
        rho=rho,
        q=q,
        M=np.array([m0, m1, m2]),
        t=t,
        step=step,
        floor_activations=floors,
        cum_dissipation=cum_diss,
        config_hash=config_hash,
    )


def state_from_checkpoint(data: CheckpointData, body, grid: CavityGrid):
    """Rebuild a CoupledState (with recovered kinematics) from checkpoint data."""
    from .dynamics import make_state

    if data.counts() != grid.counts:
        raise CheckpointError(
            f"checkpoint grid {data.counts()} does not match configuration grid {grid.counts}"
        )
    return make_state(FluidField(data.rho, data.q), data.M, data.t, body, grid)


def snapshot_export(state: CoupledState, grid: CavityGrid, path, fmt: str = "csv") -> None:
    """Dump per-cell fields: ``csv`` for inspection, ``raw`` for bit-exact reuse.

    Raw layout equals the checkpoint field blocks exactly (rho then qx, qy,
    qz, each x-fastest f64).
    """
    if fmt == "raw":
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(state.fluid.rho.flatten(order="F"), dtype="<f8").tobytes())
            for comp in range(3):
                fh.write(
                    np.ascontiguousarray(
                        state.fluid.q[..., comp].flatten(order="F"), dtype="<f8"
                    ).tobytes()
                )
        return
    if fmt != "csv":
        raise CheckpointError(f"unknown snapshot format {fmt!r}")

    n1, n2, n3 = grid.counts
    x = grid.centers
    u = state.fluid.velocity()
    v = u - (np.cross(state.omega, x) + state.xi)
    rho = state.fluid.rho
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("i,j,k,x,y,z,rho,ux,uy,uz,vx,vy,vz\n")
        for k in range(n3):
            for j in range(n2):
                for i in range(n1):
                    cols = [str(i), str(j), str(k)]
                    cols += [repr(float(c)) for c in x[i, j, k]]
                    cols.append(repr(float(rho[i, j, k])))
                    cols += [repr(float(c)) for c in u[i, j, k]]
                    cols += [repr(float(c)) for c in v[i, j, k]]
                    fh.write(",".join(cols) + "\n")
