"""File formats for run directories.

Binary matrix layout
--------------------
``NAME.bin`` holds the entries of a dense 2-D array as little-endian
float64 in row-major (C) order, with no padding.  ``NAME.json`` is its
header::

    {"format": "hbloc-matrix/1", "dtype": "<f8", "order": "C",
     "shape": [rows, cols], "rows": <row labels or null>,
     "cols": <column labels or null>, "units": "...", "meta": {...}}

Chains
------
Long CSV with header ``iteration,component,value``; one row per stored
draw and component, iterations counted from 1.  The same draws are also
written in the binary matrix layout (one row per stored iteration).
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

__all__ = [
    "MATRIX_FORMAT",
    "write_matrix",
    "read_matrix",
    "write_vector_csv",
    "read_vector_csv",
    "write_table_csv",
    "write_chain_csv",
    "read_chain_csv",
    "write_json",
    "read_json",
    "file_sha256",
    "run_lock",
    "RunLockedError",
]

MATRIX_FORMAT = "hbloc-matrix/1"


def _fmt(x):
    # shortest round-trip representation
    return repr(float(x))


def write_matrix(path, M, *, rows=None, cols=None, units="", meta=None):
    """Write ``M`` as ``path.bin`` + ``path.json``; returns both paths."""
    path = Path(path)
    M = np.ascontiguousarray(np.atleast_2d(np.asarray(M, dtype=float)))
    if M.ndim != 2:
        raise ValueError("only 2-D arrays are supported")
    for labels, n, what in ((rows, M.shape[0], "rows"), (cols, M.shape[1], "cols")):
        if labels is not None and len(labels) != n:
            raise ValueError(f"{what} labels have length {len(labels)}, expected {n}")
    bin_path = path.with_suffix(".bin")
    hdr_path = path.with_suffix(".json")
    bin_path.write_bytes(M.astype("<f8", copy=False).tobytes(order="C"))
    header = {
        "format": MATRIX_FORMAT,
        "dtype": "<f8",
        "order": "C",
        "shape": list(M.shape),
        "rows": None if rows is None else list(rows),
        "cols": None if cols is None else list(cols),
        "units": units,
        "meta": meta or {},
    }
    write_json(hdr_path, header)
    return bin_path, hdr_path


def read_matrix(path):
    """Inverse of :func:`write_matrix`; returns ``(array, header)``."""
    path = Path(path)
    header = read_json(path.with_suffix(".json"))
    if header.get("format") != MATRIX_FORMAT:
        raise ValueError(f"{path.with_suffix('.json')}: not a {MATRIX_FORMAT} header")
    shape = tuple(header["shape"])
    raw = path.with_suffix(".bin").read_bytes()
    if len(raw) != 8 * int(np.prod(shape)):
        raise ValueError(f"{path.with_suffix('.bin')}: size {len(raw)} does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float), header


def write_vector_csv(path, values, name="value", index_name="index"):
    values = np.asarray(values, dtype=float).ravel()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([index_name, name])
        for i, v in enumerate(values):
            w.writerow([i, _fmt(v)])


def read_vector_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([float(r[1]) for r in rows[1:]])


def write_table_csv(path, header, rows):
    """Plain CSV; floats are written with round-trip precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])


def write_chain_csv(path, iterations, draws, components=None):
    """Long-format chain export ``iteration,component,value``."""
    draws = np.asarray(draws, dtype=float)
    iterations = np.asarray(iterations)
    if draws.ndim != 2 or draws.shape[0] != iterations.size:
        raise ValueError("draws must be (n_stored, n_components) matching iterations")
    comps = np.arange(draws.shape[1]) if components is None else np.asarray(components)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "component", "value"])
        for it, row in zip(iterations, draws):
            for c, v in zip(comps, row):
                w.writerow([int(it), int(c), _fmt(v)])


def read_chain_csv(path):
    """Returns ``(iterations, components, draws)`` with draws ``(n_iter, n_comp)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    its = np.unique(data[:, 0]).astype(np.int64)
    comps = np.unique(data[:, 1]).astype(np.int64)
    draws = data[:, 2].reshape(its.size, comps.size)
    return its, comps, draws


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def file_sha256(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


class RunLockedError(RuntimeError):
    pass


@contextmanager
def run_lock(run_dir):
    """Exclusive ownership of ``run_dir`` through an ``O_EXCL`` lock file."""
    lock = Path(run_dir) / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunLockedError(f"{run_dir} is locked by another command (remove {lock} if stale)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)
