"""JSON (de)serialization of quadratic port-Hamiltonian systems.

Two document shapes are accepted::

    {"n": 2, "d": 1, "J": [[0, 1], [-1, 0]], "R": [[0, 0], [0, 0.1]],
     "B": [[0], [1]], "Q": [[1, 0], [0, 1]]}

    {"generator": "msd_chain", "params": {"n_cells": 50, "spectral_radius": 10}}

Matrices are row-major, either as nested rows or as one flat list.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from phsplit.benchmarks import make_benchmark
from phsplit.core import QuadraticPHSystem, StructureError


def _matrix(doc, key, rows, cols):
    if cols == 0:
        return np.zeros((rows, 0))
    raw = np.asarray(doc[key], dtype=float)
    if raw.ndim == 1:
        if raw.size != rows * cols:
            raise StructureError(f"{key} has {raw.size} entries, expected {rows * cols}")
        raw = raw.reshape(rows, cols)
    if raw.shape != (rows, cols):
        raise StructureError(f"{key} has shape {raw.shape}, expected ({rows}, {cols})")
    return raw


def system_from_dict(doc: dict) -> QuadraticPHSystem:
    if "generator" in doc:
        return make_benchmark(doc["generator"], doc.get("params"))
    n = int(doc["n"])
    d = int(doc.get("d", 0))
    return QuadraticPHSystem(
        J=_matrix(doc, "J", n, n),
        R=_matrix(doc, "R", n, n),
        Q=_matrix(doc, "Q", n, n),
        B=_matrix(doc, "B", n, d),
        name=doc.get("name", ""),
    )


def system_to_dict(sys: QuadraticPHSystem) -> dict:
    def rows(M):
        M = M.toarray() if sp.issparse(M) else np.asarray(M)
        return M.tolist()

    return {"n": sys.n, "d": sys.d, "J": rows(sys.J), "R": rows(sys.R), "B": rows(sys.B),
            "Q": rows(sys.Q), "name": sys.name}


def load_system(path) -> QuadraticPHSystem:
    return system_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_system(sys: QuadraticPHSystem, path) -> None:
    Path(path).write_text(json.dumps(system_to_dict(sys), indent=1), encoding="utf-8")
