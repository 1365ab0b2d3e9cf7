"""Conductance-weighted random walks, hitting probabilities and curve distances.

Monte Carlo runs give every walk its own Philox stream keyed by
``(seed, walk_index)``.  Walks are simulated in fixed-size chunks, so the
output does not depend on how many worker threads process the chunks.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
import scipy.sparse as sp

from .errors import IsolatedVertex, Truncated
from .harmonic import _check_components, _pcg
from .tilings import build_counterexample_graph, nearest_vertex

__all__ = [
    "WalkPath",
    "HittingResult",
    "transition_tables",
    "walk_step",
    "run_until_exit",
    "walk_stream",
    "simulate_absorption",
    "cmp_distance",
    "hitting_probability_exact",
    "counterexample_experiment",
    "counterexample_formula",
    "walk_trace_export",
    "trace_csv",
    "STEP_BUDGET",
]

STEP_BUDGET = 10**8
CHUNK = 512
BLOCK = 256


@dataclass
class WalkPath:
    """Visited vertices of a walk and the polyline through their positions.

    ``exit_index`` is the position in ``vertex_indices`` of the first vertex
    outside the region, or None.
    """

    vertex_indices: np.ndarray
    positions: np.ndarray
    exit_index: Optional[int]
    truncated: bool = False

    def __len__(self):
        return len(self.vertex_indices)


@dataclass
class HittingResult:
    p_exact: float
    p_mc: float
    mc_stderr: float
    n_walks: int
    d: int = 0
    N: int = 0
    T: int = 0

    @property
    def q_exact(self):
        return 1.0 - self.p_exact

    @property
    def formula(self):
        return counterexample_formula(self.N)

    @property
    def mc_within_3sigma(self):
        return abs(self.p_exact - self.p_mc) <= 3.0 * self.mc_stderr


def counterexample_formula(N):
    """Closed-form hitting probability ``(2N + 1) / (6N + 1)``."""
    return (2 * N + 1) / (6 * N + 1)


def transition_tables(g):
    """Padded neighbour and cumulative-probability tables, cached on ``g``.

    Row ``v`` lists the neighbours of ``v`` in increasing index order with the
    cumulative sums of ``a(v, w) / a(v)``; the last valid entry is exactly 1
    and padding is 2, so ``count(P[v] <= u)`` is the inverse CDF for ``u`` in
    ``[0, 1)``.
    """
    cached = getattr(g, "_walk_tables", None)
    if cached is not None:
        return cached
    A = g.conductance_matrix.copy()
    A.sort_indices()
    n = A.shape[0]
    deg = np.diff(A.indptr)
    dmax = max(int(deg.max()), 1)
    rows = np.repeat(np.arange(n), deg)
    cols = np.arange(A.nnz) - A.indptr[rows]
    Nb = np.full((n, dmax), -1, dtype=np.int64)
    W = np.zeros((n, dmax))
    Nb[rows, cols] = A.indices
    W[rows, cols] = A.data
    cum = np.cumsum(W, axis=1)
    tot = cum[:, -1:].copy()
    tot[tot == 0] = 1.0
    P = cum / tot
    P[np.arange(dmax)[None, :] >= deg[:, None]] = 2.0
    has = deg > 0
    P[np.flatnonzero(has), deg[has] - 1] = 1.0
    tables = (Nb, P, deg)
    try:
        object.__setattr__(g, "_walk_tables", tables)
    except Exception:
        pass
    return tables


def walk_step(g, v, rng):
    """One step from ``v``: neighbour ``w`` with probability ``a(v, w) / a(v)``.

    Raises
    ------
    IsolatedVertex
    """
    Nb, P, deg = transition_tables(g)
    if deg[v] == 0:
        raise IsolatedVertex(f"vertex {v} has no neighbours")
    u = rng.random()
    return int(Nb[v, np.count_nonzero(P[v] <= u)])


def run_until_exit(t, sub, z, rng, max_steps=STEP_BUDGET, allow_truncated=False):
    """Walk from the site nearest ``z`` until the first vertex outside ``sub.interior``.

    Raises
    ------
    Truncated
        If ``max_steps`` steps pass without exit (unless ``allow_truncated``,
        in which case the partial path is returned flagged).
    """
    Nb, P, deg = transition_tables(t)
    inside = sub.interior_mask
    v = nearest_vertex(t, z)
    path = [v]
    steps = 0
    while inside[v] and steps < max_steps:
        us = rng.random(min(4096, max_steps - steps))
        for u in us:
            if deg[v] == 0:
                raise IsolatedVertex(f"vertex {v} has no neighbours")
            v = int(Nb[v, np.count_nonzero(P[v] <= u)])
            path.append(v)
            steps += 1
            if not inside[v]:
                break
    idx = np.asarray(path, dtype=np.int64)
    exited = not inside[v]
    wp = WalkPath(idx, t.sites[idx], len(idx) - 1 if exited else None, not exited)
    if not exited and not allow_truncated:
        raise Truncated(f"no exit after {max_steps} steps", wp)
    return wp


def walk_stream(seed, walk_index):
    """Generator of walk ``walk_index``: Philox keyed by ``(seed, walk_index)``."""
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(walk_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _simulate_chunk(Nb, P, absorbing, starts, first_index, seed, max_steps):
    m = len(starts)
    gens = [walk_stream(seed, first_index + i) for i in range(m)]
    pos = starts.copy()
    steps = np.zeros(m, dtype=np.int64)
    active = np.flatnonzero(~absorbing[pos])
    U = np.empty((m, BLOCK))
    col = BLOCK
    while len(active):
        if col == BLOCK:
            for i in active:
                U[i] = gens[i].random(BLOCK)
            col = 0
        u = U[active, col]
        col += 1
        cur = pos[active]
        k = (P[cur] <= u[:, None]).sum(axis=1)
        pos[active] = Nb[cur, k]
        steps[active] += 1
        alive = ~absorbing[pos[active]] & (steps[active] < max_steps)
        active = active[alive]
    return pos, steps


def simulate_absorption(g, start, absorbing, n_walks, seed, threads=1, max_steps=STEP_BUDGET):
    """Run ``n_walks`` independent walks until they hit ``absorbing``.

    Parameters
    ----------
    g : Tiling or CombinatorialGraph
    start : int or ndarray of int
    absorbing : ndarray of bool, shape (n,)
    seed : int
    threads : int
        Worker threads; the result does not depend on it.

    Returns
    -------
    final : ndarray of int
        Vertex at absorption.
    steps : ndarray of int

    Raises
    ------
    Truncated
        If any walk exceeds ``max_steps``.
    """
    Nb, P, deg = transition_tables(g)
    absorbing = np.asarray(absorbing, dtype=bool)
    starts = np.broadcast_to(np.asarray(start, dtype=np.int64), (n_walks,)).copy()
    if np.any(deg[starts[~absorbing[starts]]] == 0):
        raise IsolatedVertex("a start vertex has no neighbours")
    bounds = [(a, min(a + CHUNK, n_walks)) for a in range(0, n_walks, CHUNK)]

    def job(ab):
        a, b = ab
        return _simulate_chunk(Nb, P, absorbing, starts[a:b], a, seed, max_steps)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(job, bounds))
    else:
        parts = [job(ab) for ab in bounds]
    final = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, dtype=np.int64)
    steps = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, dtype=np.int64)
    if np.any(~absorbing[final]):
        raise Truncated(f"{int(np.sum(~absorbing[final]))} walk(s) hit the step budget")
    return final, steps


# ---------------------------------------------------------------------------
# curves modulo parameterization


@numba.njit(cache=True)
def _discrete_frechet(P, Q):
    n, m = P.shape[0], Q.shape[0]
    prev = np.empty(m)
    cur = np.empty(m)
    for j in range(m):
        s = 0.0
        for a in range(P.shape[1]):
            t = P[0, a] - Q[j, a]
            s += t * t
        d = math.sqrt(s)
        prev[j] = d if j == 0 else max(prev[j - 1], d)
    for i in range(1, n):
        for j in range(m):
            s = 0.0
            for a in range(P.shape[1]):
                t = P[i, a] - Q[j, a]
                s += t * t
            d = math.sqrt(s)
            if j == 0:
                cur[j] = max(prev[0], d)
            else:
                best = min(prev[j], prev[j - 1], cur[j - 1])
                cur[j] = max(best, d)
        prev, cur = cur, prev
    return prev[m - 1]


def _diameter(X):
    if len(X) < 2:
        return 0.0
    diff = X[:, None, :] - X[None, :, :]
    return float(np.sqrt((diff**2).sum(-1).max()))


def _subdivide(X, step):
    if step <= 0 or len(X) < 2:
        return X
    pieces = [X[:1]]
    for a, b in zip(X[:-1], X[1:]):
        L = float(np.linalg.norm(b - a))
        k = max(1, int(math.ceil(L / step))) if L > 0 else 1
        s = np.arange(1, k + 1)[:, None] / k
        pieces.append(a + s * (b - a))
    return np.vstack(pieces)


def cmp_distance(phi1, phi2, max_step=None):
    """Discrete Frechet distance between two polylines.

    Segments are subdivided so that no piece is longer than ``max_step``,
    by default 1% of the smaller of the two curve diameters.  The value is
    an upper approximation of the distance modulo monotone reparameterization
    and converges to it as ``max_step`` shrinks.  With a common ``max_step``
    the function is an exact pseudo-metric on the subdivided point sequences.
    """
    A = np.atleast_2d(np.asarray(phi1, dtype=float))
    B = np.atleast_2d(np.asarray(phi2, dtype=float))
    if len(A) == 0 or len(B) == 0:
        raise ValueError("curves must be nonempty")
    if max_step is None:
        max_step = 0.01 * min(_diameter(A), _diameter(B))
    return float(_discrete_frechet(_subdivide(A, max_step), _subdivide(B, max_step)))


# ---------------------------------------------------------------------------
# exact hitting probabilities


def hitting_probability_exact(g, A, B, start, rtol=1e-13):
    """Probability that the walk from ``start`` hits ``A`` before ``B``.

    Solves ``h = 1`` on ``A``, ``0`` on ``B`` and ``h`` harmonic elsewhere
    by Jacobi-preconditioned CG to relative residual ``rtol``.

    Raises
    ------
    DisconnectedComponent
        If some non-absorbing component cannot reach ``A`` or ``B``.
    """
    n = g.n
    A = np.asarray(A, dtype=np.int64)
    B = np.asarray(B, dtype=np.int64)
    absorb = np.zeros(n, dtype=bool)
    absorb[A] = True
    absorb[B] = True
    if absorb[start]:
        raise ValueError("start must not be absorbing")
    S = np.flatnonzero(~absorb)
    C = g.conductance_matrix
    Css = C[S][:, S]
    _check_components(g, S, Css)
    rhs = np.asarray(C[S][:, A].sum(axis=1)).ravel()
    diag = g.total_conductance[S]
    L = (sp.diags(diag) - Css).tocsr()
    h, _, _ = _pcg(L, rhs, diag, rtol, None)
    return float(h[np.searchsorted(S, start)])


def counterexample_experiment(d, N, T, n_walks, seed, threads=1, start=None):
    """Exact and Monte Carlo probability of hitting the far big layer first."""
    g = build_counterexample_graph(d, N, T)
    A, B = g.meta["A"], g.meta["B"]
    s = g.meta["start"] if start is None else start
    p = hitting_probability_exact(g, A, B, s)
    p_mc, se = float("nan"), float("nan")
    if n_walks > 0:
        absorb = np.zeros(g.n, dtype=bool)
        absorb[A] = True
        absorb[B] = True
        final, _ = simulate_absorption(g, s, absorb, n_walks, seed, threads)
        hitA = np.isin(final, A)
        p_mc = float(hitA.mean())
        se = math.sqrt(max(p_mc * (1 - p_mc), 1e-300) / n_walks)
    return HittingResult(p, p_mc, se, n_walks, d, N, T)


# ---------------------------------------------------------------------------
# traces


def walk_trace_export(path, t):
    """Visit-order records of a walk with the visited cells' geometry.

    Returns a JSON-serializable dict with one record per path vertex.
    """
    recs = []
    cells = getattr(t, "cells", None)
    for step, v in enumerate(path.vertex_indices):
        v = int(v)
        rec = {"step": step, "vertex_index": v, "position": [float(c) for c in t.sites[v]]}
        if cells is not None:
            cell = cells[v]
            rec["cell_vertices"] = cell.vertices.tolist()
            rec["cell_facets"] = [list(map(int, f.indices)) for f in cell.facets]
        recs.append(rec)
    return {"dim": int(t.sites.shape[1]), "exit_index": path.exit_index, "records": recs}


def trace_csv(trace):
    """CSV text with columns ``step, vertex_index, x1..xd``."""
    d = trace["dim"]
    lines = ["step,vertex_index," + ",".join(f"x{i + 1}" for i in range(d))]
    for r in trace["records"]:
        lines.append(",".join([str(r["step"]), str(r["vertex_index"])] + [repr(float(x)) for x in r["position"]]))
    return "\n".join(lines) + "\n"
