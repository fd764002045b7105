"""Lossless CSV and binary serialization of trajectory ensembles.

CSV files start with one ``#`` line holding JSON metadata followed by a header row
``path,node,time,v0,...``; floats are written with ``repr`` so they parse back
bit-for-bit. Rows are ordered by path, then node.

Binary layout (little endian)::

    magic     8 bytes   b"RSMPTRJ1"
    T         float64
    M         uint32    number of grid steps
    n_nodes   uint32    M or M + 1
    N         uint64    number of paths
    seed      uint64
    ndim      uint32    number of trailing component axes
    dims      ndim x uint32
    label_len uint32
    label     label_len bytes, UTF-8
    values    n_nodes * N * prod(dims) float64, C order
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .paths import TimeGrid, TrajectoryEnsemble

MAGIC = b"RSMPTRJ1"
_HEAD = struct.Struct("<dIIQQI")


def _component_names(shape):
    if not shape:
        return ["v"]
    return ["v" + "_".join(str(i) for i in idx) for idx in np.ndindex(*shape)]


def ensemble_to_csv(ens: TrajectoryEnsemble) -> str:
    buf = io.StringIO()
    shape = ens.shape
    meta = {"label": ens.label, "T": ens.grid.T, "M": ens.grid.M, "seed": ens.seed, "shape": list(shape)}
    buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "node", "time", *_component_names(shape)])
    t = ens.grid.t
    flat = ens.values.reshape(ens.n_nodes, ens.N, -1)
    for path in range(ens.N):
        for node in range(ens.n_nodes):
            w.writerow([path, node, repr(float(t[node])), *(repr(float(v)) for v in flat[node, path])])
    return buf.getvalue()


def ensemble_from_csv(text: str) -> TrajectoryEnsemble:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError("missing metadata line")
    meta = json.loads(lines[0][2:])
    shape = tuple(meta["shape"])
    rows = list(csv.reader(lines[1:]))
    body = rows[1:]
    paths = int(body[-1][0]) + 1 if body else 0
    n_nodes = len(body) // paths if paths else 0
    width = int(np.prod(shape)) if shape else 1
    vals = np.array([[float(v) for v in r[3:]] for r in body]).reshape(paths, n_nodes, width)
    values = np.ascontiguousarray(vals.transpose(1, 0, 2)).reshape((n_nodes, paths) + shape)
    grid = TimeGrid(float(meta["T"]), int(meta["M"]))
    return TrajectoryEnsemble(grid, values, meta["label"], int(meta["seed"]))


def ensemble_to_bytes(ens: TrajectoryEnsemble) -> bytes:
    label = ens.label.encode("utf-8")
    shape = ens.shape
    parts = [MAGIC, _HEAD.pack(float(ens.grid.T), ens.grid.M, ens.n_nodes, ens.N, ens.seed, len(shape)),
             struct.pack(f"<{len(shape)}I", *shape), struct.pack("<I", len(label)), label,
             np.ascontiguousarray(ens.values, dtype="<f8").tobytes()]
    return b"".join(parts)


def ensemble_from_bytes(data: bytes) -> TrajectoryEnsemble:
    if data[:8] != MAGIC:
        raise ValueError("not a trajectory dump (bad magic)")
    off = 8
    T, M, n_nodes, N, seed, ndim = _HEAD.unpack_from(data, off)
    off += _HEAD.size
    shape = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    (n_label,) = struct.unpack_from("<I", data, off)
    off += 4
    label = data[off:off + n_label].decode("utf-8")
    off += n_label
    count = n_nodes * N * int(np.prod(shape, dtype=np.int64))
    values = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float)
    if off + 8 * count != len(data):
        raise ValueError("trailing or missing bytes in trajectory dump")
    return TrajectoryEnsemble(TimeGrid(T, M), values.reshape((n_nodes, N) + tuple(shape)), label, seed)


def write_ensemble(ens: TrajectoryEnsemble, stem: Path, fmt: str = "csv") -> list:
    """Write ``stem``.csv and/or ``stem``.bin; ``fmt`` is "csv", "bin" or "both". Returns the paths."""
    stem = Path(stem)
    out = []
    if fmt in ("csv", "both"):
        p = stem.with_suffix(".csv")
        p.write_text(ensemble_to_csv(ens))
        out.append(p)
    if fmt in ("bin", "both"):
        p = stem.with_suffix(".bin")
        p.write_bytes(ensemble_to_bytes(ens))
        out.append(p)
    if not out:
        raise ValueError(f"unknown export format {fmt!r}")
    return out


def read_ensemble(path: Path) -> TrajectoryEnsemble:
    path = Path(path)
    if path.suffix == ".bin":
        return ensemble_from_bytes(path.read_bytes())
    return ensemble_from_csv(path.read_text())
