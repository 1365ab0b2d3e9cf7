"""JSON serialization of tilings and graphs, and atomic file writes.

Floats are written with Python's shortest round-trip repr, so a tiling read
back from its file is bit-identical to the one written.  Facets store their
vertex loop as indices into the cell's vertex array; box facets carry a
negative ``neighbor`` label.
"""
from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import ConfigError
from .geometry import Box, Facet, Polytope
from .tilings import CombinatorialGraph, EdgeTable, Tiling

__all__ = [
    "to_jsonable",
    "tiling_to_dict",
    "tiling_from_dict",
    "dumps_tiling",
    "loads_tiling",
    "atomic_write",
]


def to_jsonable(x):
    """Recursively convert numpy containers and scalars to plain Python."""
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return to_jsonable(x.tolist())
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def _facet_indices(cell, f):
    if f.indices is not None:
        return [int(i) for i in f.indices]
    # match loop points against the vertex array
    out = []
    for p in f.points:
        j = int(np.argmin(((cell.vertices - p) ** 2).sum(axis=1)))
        out.append(j)
    return out


def _edges_dict(e):
    return [
        {
            "u": int(e.u[k]),
            "v": int(e.v[k]),
            "length": float(e.length[k]),
            "facet_area": float(e.facet_area[k]),
            "conductance": float(e.conductance[k]),
            "qe_volume": float(e.qe_volume[k]),
        }
        for k in range(len(e))
    ]


def tiling_to_dict(t):
    """Plain-data form of a :class:`Tiling` or :class:`CombinatorialGraph`."""
    meta = to_jsonable(dict(t.meta))
    if isinstance(t, CombinatorialGraph):
        return {
            "kind": "graph",
            "dim": int(t.dim),
            "sites": to_jsonable(t.sites),
            "edges": _edges_dict(t.edges),
            "meta": meta,
        }
    meta.setdefault("epsilon", float(t.epsilon))
    cells = []
    for c in t.cells:
        cells.append({
            "vertices": to_jsonable(c.vertices),
            "facets": [
                {
                    "loop_indices": _facet_indices(c, f),
                    "normal": to_jsonable(np.asarray(f.normal, dtype=float)),
                    "area": float(f.area),
                    "neighbor": int(f.neighbor),
                }
                for f in c.facets
            ],
            "volume": float(c.volume),
        })
    return {
        "kind": "tiling",
        "dim": int(t.dim),
        "box": t.domain_box.to_pairs(),
        "sites": to_jsonable(t.sites),
        "cells": cells,
        "edges": _edges_dict(t.edges),
        "meta": meta,
    }


def _edge_table_from(rows):
    def col(name, dtype):
        return np.array([r[name] for r in rows], dtype=dtype)

    if not rows:
        z = np.zeros(0)
        return EdgeTable(np.zeros(0, np.int64), np.zeros(0, np.int64), z, z.copy(), z.copy(), z.copy())
    return EdgeTable(
        col("u", np.int64),
        col("v", np.int64),
        col("length", float),
        col("facet_area", float),
        col("conductance", float),
        col("qe_volume", float),
    )


def tiling_from_dict(data):
    """Inverse of :func:`tiling_to_dict`.

    Raises
    ------
    ConfigError
        On a missing key or inconsistent shapes.
    """
    try:
        d = int(data["dim"])
        sites = np.array(data["sites"], dtype=float).reshape(-1, d)
        edges = _edge_table_from(data["edges"])
        meta = dict(data.get("meta", {}))
        if data.get("kind", "tiling") == "graph":
            return CombinatorialGraph(sites, edges, meta)
        box = Box.from_pairs(data["box"])
        cells = []
        for c in data["cells"]:
            V = np.array(c["vertices"], dtype=float).reshape(-1, d)
            facets = []
            for f in c["facets"]:
                idx = tuple(int(i) for i in f["loop_indices"])
                facets.append(Facet(V[list(idx)], np.array(f["normal"], dtype=float),
                                    float(f["area"]), int(f["neighbor"]), idx))
            cells.append(Polytope(V, facets, float(c["volume"])))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed tiling data: {exc}") from exc
    if len(cells) != len(sites):
        raise ConfigError("tiling has a different number of cells and sites")
    return Tiling(d, sites, cells, edges, box, meta)


def dumps_tiling(t):
    return json.dumps(tiling_to_dict(t), separators=(",", ":"), sort_keys=True) + "\n"


def loads_tiling(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"tiling file is not valid JSON (line {exc.lineno}): {exc.msg}") from exc
    return tiling_from_dict(data)


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and rename.

    A failure before the rename leaves any previous file untouched and no
    partial output behind.
    """
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
