"""Binary snapshot files for structure fields.

Layout, all little-endian: magic ``ACJF``; version u32; dim u32; N per axis
u32; L per axis f64; metric tag u32 (0 flat, 1 perturbed, then amplitude f64
and seed u64); time f64; the field as f64 in C order over (x, beta, alpha).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SnapshotError
from .flow import FlowState
from .grid import DIM, GridSpec, MetricField

MAGIC = b"ACJF"
VERSION = 1
_TAGS = {"flat": 0, "perturbed": 1}


@dataclass
class Snapshot:
    grid: GridSpec
    metric_tag: str
    amplitude: float
    seed: int
    state: FlowState


def header_size(tag: str) -> int:
    n = 4 + 4 + 4 + 4 * DIM + 8 * DIM + 4 + 8
    return n + (16 if tag == "perturbed" else 0)


def encode(J: np.ndarray, t: float, metric: MetricField) -> bytes:
    grid = metric.grid
    if J.shape != grid.shape + (DIM, DIM):
        raise SnapshotError("field shape does not match the grid")
    parts = [MAGIC, struct.pack("<II", VERSION, DIM)]
    parts.append(struct.pack(f"<{DIM}I", *grid.points))
    parts.append(struct.pack(f"<{DIM}d", *grid.lengths))
    parts.append(struct.pack("<I", _TAGS[metric.tag]))
    if metric.tag == "perturbed":
        parts.append(struct.pack("<dQ", metric.amplitude, metric.seed))
    parts.append(struct.pack("<d", t))
    parts.append(np.ascontiguousarray(J, dtype="<f8").tobytes())
    return b"".join(parts)


def write_snapshot(state: FlowState, metric: MetricField, path) -> None:
    Path(path).write_bytes(encode(state.J, state.t, metric))


def decode(buf: bytes) -> Snapshot:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise SnapshotError("bad magic")
    version, dim = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise SnapshotError(f"unsupported version {version}")
    if dim != DIM:
        raise SnapshotError(f"unsupported dimension {dim}")
    off = 12
    try:
        pts = struct.unpack_from(f"<{DIM}I", buf, off)
        off += 4 * DIM
        lens = struct.unpack_from(f"<{DIM}d", buf, off)
        off += 8 * DIM
        (tag_code,) = struct.unpack_from("<I", buf, off)
        off += 4
        tags = {v: k for k, v in _TAGS.items()}
        if tag_code not in tags:
            raise SnapshotError(f"unknown metric tag {tag_code}")
        tag = tags[tag_code]
        amp, seed = 0.0, 0
        if tag == "perturbed":
            amp, seed = struct.unpack_from("<dQ", buf, off)
            off += 16
        (t,) = struct.unpack_from("<d", buf, off)
        off += 8
    except struct.error:
        raise SnapshotError("truncated header") from None
    try:
        grid = GridSpec(pts, lens)
    except ValueError as exc:
        raise SnapshotError(f"invalid grid in header: {exc}") from None
    count = grid.size * DIM * DIM
    if len(buf) - off != 8 * count:
        raise SnapshotError(f"payload has {len(buf) - off} bytes, expected {8 * count}")
    J = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(grid.shape + (DIM, DIM))
    return Snapshot(grid, tag, float(amp), int(seed), FlowState(J=J, t=float(t)))


def read_snapshot(path, metric: MetricField | None = None) -> Snapshot:
    """Read a snapshot; with ``metric`` given, its grid and tag must match."""
    snap = decode(Path(path).read_bytes())
    if metric is not None:
        if snap.grid != metric.grid:
            raise SnapshotError("snapshot grid does not match the configuration")
        if snap.metric_tag != metric.tag or (
            metric.tag == "perturbed" and (snap.amplitude, snap.seed) != (metric.amplitude, metric.seed)
        ):
            raise SnapshotError("snapshot metric does not match the configuration")
    return snap
