"""Discrete Dirichlet problems, harmonic measure and column diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import LinearOperator, cg
from scipy.special import gamma as gamma_fn
from scipy.special import lpmv

from .errors import DisconnectedComponent, NoConvergence
from .fvm import Ball

__all__ = [
    "HarmonicSolution",
    "BoundaryDistribution",
    "ColumnDiagnostic",
    "solve_dirichlet",
    "harmonic_extension",
    "discrete_harmonic_measure",
    "sphere_area",
    "poisson_kernel_ball",
    "sphere_quadrature",
    "harmonic_test_functions",
    "weak_distance",
    "column_diagnostic",
    "column_vertices",
    "sup_error_bound_2d",
    "fit_decay_constant",
    "SOLVER_RTOL",
]

SOLVER_RTOL = 1e-10


@dataclass
class HarmonicSolution:
    """Solution of a Dirichlet problem on a subdomain.

    ``boundary_values`` and ``interior_values`` are aligned with
    ``sub.boundary`` and ``sub.interior``.
    """

    sub: object
    boundary_values: np.ndarray
    interior_values: np.ndarray
    residual_inf: float
    iterations: int

    def full(self, fill=np.nan):
        """Vertex function on the whole graph, ``fill`` outside the closure."""
        out = np.full(self.sub.n, fill, dtype=float)
        out[self.sub.boundary] = self.boundary_values
        out[self.sub.interior] = self.interior_values
        return out


def _check_components(t, S, Ass):
    """Every component of the induced subgraph on ``S`` must leak to its complement."""
    ncomp, lab = csgraph.connected_components(Ass, directed=False)
    leak = t.total_conductance[S] - np.asarray(Ass.sum(axis=1)).ravel()
    per = np.bincount(lab, leak, ncomp)
    scale = np.bincount(lab, t.total_conductance[S], ncomp)
    bad = np.flatnonzero(per <= 1e-14 * scale)
    if len(bad):
        raise DisconnectedComponent(f"{len(bad)} component(s) touch no boundary vertex")


def _solve_on(t, S, g, rtol=SOLVER_RTOL, max_iter=None):
    """Solve ``Delta_a h = 0`` on ``S`` with ``h = g`` elsewhere.

    Returns ``(x, residual_inf, iterations)``.
    """
    S = np.asarray(S, dtype=np.int64)
    A = t.conductance_matrix
    Ass = A[S][:, S]
    _check_components(t, S, Ass)
    gz = np.array(g, dtype=float)
    gz[S] = np.nan
    # shifting by a mean of the data makes constant data exact
    ring = np.unique(A[S].indices)
    vals = gz[ring]
    vals = vals[np.isfinite(vals)]
    c = float(np.median(vals)) if len(vals) else 0.0
    gz = gz - c
    gz[~np.isfinite(gz)] = 0.0
    b = A[S] @ gz
    diag = t.total_conductance[S]
    Lss = (sp.diags(diag) - Ass).tocsr()
    x, res, it = _pcg(Lss, b, diag, rtol, max_iter)
    return x + c, res, it


def _pcg(Lss, b, diag, rtol, max_iter):
    n = Lss.shape[0]
    if max_iter is None:
        max_iter = 20 * n
    if not np.any(b):
        return np.zeros(n), 0.0, 0
    inv = 1.0 / diag
    M = LinearOperator((n, n), matvec=lambda r: inv * r, dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    x, info = cg(Lss, b, rtol=rtol, atol=0.0, maxiter=max_iter, M=M, callback=cb)
    res = float(np.abs(b - Lss @ x).max())
    if info != 0:
        raise NoConvergence(f"CG stopped after {count[0]} iterations (info={info})")
    return x, res, count[0]


def _boundary_data(t, sub, g):
    if callable(g):
        return np.asarray(g(t.sites[sub.boundary]), dtype=float)
    g = np.asarray(g, dtype=float)
    if g.shape == (len(sub.boundary),):
        return g
    if g.shape == (t.n,):
        return g[sub.boundary]
    raise ValueError("boundary data must be callable, per boundary site, or per vertex")


def solve_dirichlet(t, sub, g, rtol=SOLVER_RTOL, max_iter=None):
    """Discrete harmonic function on ``sub.interior`` with boundary data ``g``.

    Parameters
    ----------
    t : Tiling or CombinatorialGraph
    sub : SubdomainIndex
    g : callable or ndarray
        Called on boundary positions, or values per boundary site, or a
        full vertex function.
    rtol : float
        Relative residual of the Jacobi-preconditioned CG solve.

    Raises
    ------
    DisconnectedComponent, NoConvergence
    """
    gb = _boundary_data(t, sub, g)
    full = np.zeros(t.n)
    full[sub.boundary] = gb
    x, res, it = _solve_on(t, sub.interior, full, rtol, max_iter)
    return HarmonicSolution(sub, gb, x, res, it)


def harmonic_extension(t, S, g, rtol=SOLVER_RTOL):
    """Replace ``g`` on ``S`` by the discrete harmonic extension of the rest.

    ``g`` is a full vertex function; values on ``S`` are ignored.  Each
    connected component of ``S`` is an independent block of the same linear
    system, so one solve covers all of them.
    """
    out = np.array(g, dtype=float)
    S = np.asarray(S, dtype=np.int64)
    if len(S) == 0:
        return out
    x, _, _ = _solve_on(t, S, out, rtol)
    out[S] = x
    return out


@dataclass
class BoundaryDistribution:
    """Probability distribution on boundary sites."""

    sites: np.ndarray
    probs: np.ndarray
    positions: np.ndarray
    source: Optional[int] = None

    def expectation(self, f):
        return float(np.dot(self.probs, f(self.positions)))


def discrete_harmonic_measure(t, sub, start, rtol=1e-13):
    """Exit distribution of the walk from ``start`` on ``sub.boundary``.

    With ``G`` the inverse of the interior block of ``D - A``, the expected
    number of visits to ``v`` before exit is ``G[start, v] a(v)``, hence
    ``P(exit at b) = sum_v G[start, v] a(v, b)``.  By symmetry of ``G`` this
    needs a single solve with right-hand side ``e_start``.
    """
    I = sub.interior
    pos = np.searchsorted(I, start)
    if pos >= len(I) or I[pos] != start:
        raise ValueError("start must be an interior site")
    A = t.conductance_matrix
    Aii = A[I][:, I]
    _check_components(t, I, Aii)
    diag = t.total_conductance[I]
    Lii = (sp.diags(diag) - Aii).tocsr()
    rhs = np.zeros(len(I))
    rhs[pos] = 1.0
    w, _, _ = _pcg(Lii, rhs, diag, rtol, None)
    wfull = np.zeros(t.n)
    wfull[I] = w
    e = t.edges
    k = sub.boundary_edges
    inside_u = sub.interior_mask[e.u[k]]
    src = np.where(inside_u, e.u[k], e.v[k])
    dst = np.where(inside_u, e.v[k], e.u[k])
    mass = np.bincount(dst, wfull[src] * e.conductance[k], t.n)
    B = sub.boundary
    return BoundaryDistribution(B, mass[B], t.sites[B], int(start))


# ---------------------------------------------------------------------------
# continuum harmonic measure


def sphere_area(d):
    """Surface area of the unit sphere in ``R^d``."""
    return 2.0 * math.pi ** (d / 2.0) / float(gamma_fn(d / 2.0))


def poisson_kernel_ball(x, z, d=None):
    """Poisson kernel of the unit ball, ``(1 - |x|^2) / (omega |x - z|^d)``."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if d is None:
        d = x.shape[-1]
    r2 = float(np.dot(x, x))
    if r2 >= 1.0:
        raise ValueError("x must lie inside the unit ball")
    dist = np.linalg.norm(z - x, axis=-1)
    return (1.0 - r2) / (sphere_area(d) * dist**d)


def sphere_quadrature(d, n=64):
    """Nodes and weights on the unit sphere.

    ``d = 2``: ``n`` equispaced angles.  ``d = 3``: ``n`` Gauss-Legendre
    nodes in ``cos(theta)`` times ``2n`` equispaced azimuths.
    """
    if d == 2:
        th = 2 * math.pi * (np.arange(n) + 0.5) / n
        return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(n, 2 * math.pi / n)
    if d == 3:
        ct, wt = np.polynomial.legendre.leggauss(n)
        ph = 2 * math.pi * (np.arange(2 * n) + 0.5) / (2 * n)
        st = np.sqrt(1 - ct**2)
        pts = np.stack(
            [
                (st[:, None] * np.cos(ph)[None, :]).ravel(),
                (st[:, None] * np.sin(ph)[None, :]).ravel(),
                np.repeat(ct, 2 * n),
            ],
            axis=1,
        )
        w = (wt[:, None] * np.full(2 * n, 2 * math.pi / (2 * n))[None, :]).ravel()
        return pts, w
    raise ValueError("sphere quadrature is implemented for d in {2, 3}")


def _solid_harmonics(d, L):
    """``(name, f)`` pairs of solid harmonics up to degree ``L``."""
    out = []
    if d == 2:
        out.append(("1", lambda x: np.ones(len(x))))
        for k in range(1, L + 1):
            out.append((f"re{k}", lambda x, k=k: ((x[:, 0] + 1j * x[:, 1]) ** k).real))
            out.append((f"im{k}", lambda x, k=k: ((x[:, 0] + 1j * x[:, 1]) ** k).imag))
        return out
    for l in range(L + 1):
        for m in range(l + 1):
            for trig in ("c", "s") if m else ("c",):
                def f(x, l=l, m=m, trig=trig):
                    r = np.linalg.norm(x, axis=1)
                    ct = np.where(r > 0, x[:, 2] / np.where(r > 0, r, 1.0), 1.0)
                    ph = np.arctan2(x[:, 1], x[:, 0])
                    ang = np.cos(m * ph) if trig == "c" else np.sin(m * ph)
                    return r**l * lpmv(m, l, np.clip(ct, -1, 1)) * ang
                out.append((f"Y{l}{m}{trig}", f))
    return out


def harmonic_test_functions(d, L):
    """Solid harmonics through degree ``L`` plus coordinates, sup-normalized on the sphere."""
    raw = _solid_harmonics(d, L)
    for i in range(d):
        raw.append((f"x{i + 1}", lambda x, i=i: x[:, i].copy()))
    if d == 2:
        th = np.linspace(0, 2 * math.pi, 4096, endpoint=False)
        probe = np.stack([np.cos(th), np.sin(th)], axis=1)
    else:
        probe, _ = sphere_quadrature(3, 128)
        # Gauss nodes miss the poles, where zonal harmonics peak
        probe = np.vstack([probe, np.eye(3), -np.eye(3)])
    out = []
    for name, f in raw:
        s = float(np.abs(f(probe)).max())
        out.append((name, (lambda x, f=f, s=s: f(x) / s)))
    return out


def weak_distance(mu, t, x, L=4, ball=None, n_quad=96, return_all=False, project=True):
    """Test-function distance between a boundary distribution and harmonic measure.

    Positions are mapped to the unit ball by ``(p - c) / R`` and, with
    ``project``, radially onto the unit sphere (exit sites sit just outside
    the ball).  For every test function the discrete expectation under ``mu``
    is compared with the quadrature value of the continuum harmonic measure
    seen from ``x``.

    Parameters
    ----------
    mu : BoundaryDistribution
    t : Tiling or None
        Unused when ``mu`` carries positions; kept for symmetry with callers.
    x : array_like
        Point inside the ball.
    L : int
        Largest degree of the solid harmonics.
    ball : Ball
        Defaults to the unit ball.
    """
    pos = mu.positions if mu.positions is not None else t.sites[mu.sites]
    x = np.asarray(x, dtype=float)
    d = len(x)
    c = np.zeros(d) if ball is None else np.asarray(ball.center)
    R = 1.0 if ball is None else ball.radius
    y = (pos - c) / R
    if project:
        y = y / np.linalg.norm(y, axis=1)[:, None]
    xl = (x - c) / R
    q, w = sphere_quadrature(d, n_quad)
    pk = poisson_kernel_ball(xl, q, d) * w
    diffs = {}
    for name, f in harmonic_test_functions(d, L):
        diffs[name] = abs(float(np.dot(mu.probs, f(y))) - float(np.dot(pk, f(q))))
    best = max(diffs.values())
    return (best, diffs) if return_all else best


# ---------------------------------------------------------------------------
# column diagnostics


@dataclass
class ColumnDiagnostic:
    """Column maxima of ``|h_D - h_C|`` across samples of the projected region.

    ``j`` is the dropped coordinate (1-based).
    """

    j: int
    y_samples: np.ndarray
    column_max: np.ndarray
    ks: tuple
    thresholds: np.ndarray
    measure_estimate: np.ndarray
    projected_volume: float
    M: float
    epsilon: float
    dual_volume_sum: float

    def threshold(self, k):
        return 3.0 * k * self.M * self.epsilon * self.dual_volume_sum


def _project_region_sampler(U, j, rng, n):
    keep = [a for a in range(U.dim) if a != j]
    if isinstance(U, Ball):
        c = np.asarray(U.center)[keep]
        out = []
        while sum(len(o) for o in out) < n:
            z = rng.uniform(-1, 1, size=(2 * n, len(keep)))
            out.append(c + U.radius * z[(z**2).sum(1) < 1])
        pts = np.vstack(out)[:n]
        k = len(keep)
        vol = math.pi ** (k / 2) / float(gamma_fn(k / 2 + 1)) * U.radius**k
        return pts, vol
    lo, hi = U.lo_arr[keep], U.hi_arr[keep]
    return lo + (hi - lo) * rng.random((n, len(keep))), float(np.prod(hi - lo))


def _column_edge_hits(t, edges, j, y):
    """For each edge, the sample indices whose line along ``x_j`` crosses its facet."""
    keep = [a for a in range(t.dim) if a != j]
    hits = []
    if t.dim == 2:
        order = np.argsort(y[:, 0], kind="stable")
        ys = y[order, 0]
        for k in edges:
            f = t.facet(int(t.edges.u[k]), int(t.edges.v[k])) or t.facet(int(t.edges.v[k]), int(t.edges.u[k]))
            p = f.points[:, keep[0]]
            a, b = p.min(), p.max()
            if b - a <= 0:
                hits.append(np.array([], dtype=np.int64))
                continue
            i0, i1 = np.searchsorted(ys, a, "left"), np.searchsorted(ys, b, "right")
            hits.append(order[i0:i1])
        return hits
    for k in edges:
        f = t.facet(int(t.edges.u[k]), int(t.edges.v[k])) or t.facet(int(t.edges.v[k]), int(t.edges.u[k]))
        P = f.points[:, keep]
        lo, hi = P.min(0), P.max(0)
        cand = np.flatnonzero(np.all((y >= lo) & (y <= hi), axis=1))
        if len(cand) == 0:
            hits.append(cand)
            continue
        c = P.mean(0)
        rel = P - c
        area2 = np.sum(rel[:, 0] * np.roll(rel[:, 1], -1) - rel[:, 1] * np.roll(rel[:, 0], -1))
        if abs(area2) <= 1e-14 * max(1.0, float(np.abs(rel).max()) ** 2):
            hits.append(np.array([], dtype=np.int64))
            continue
        s = 1.0 if area2 > 0 else -1.0
        nxt = np.roll(P, -1, axis=0)
        edge = nxt - P
        q = y[cand][:, None, :] - P[None, :, :]
        cr = s * (edge[None, :, 0] * q[:, :, 1] - edge[None, :, 1] * q[:, :, 0])
        hits.append(cand[np.all(cr >= 0, axis=1)])
    return hits


def column_vertices(t, sub, j, y):
    """Closure vertices on the column through ``y`` along coordinate ``j`` (1-based)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    hits = _column_edge_hits(t, sub.closure_edges, j - 1, y)
    verts = set()
    for k, h in zip(sub.closure_edges, hits):
        if len(h):
            verts.add(int(t.edges.u[k]))
            verts.add(int(t.edges.v[k]))
    return np.array(sorted(verts), dtype=np.int64)


def column_diagnostic(t, sub, h_D, h_C, j, n_samples=4096, seed=0, ks=(1, 2, 4, 8)):
    """Sample columns of the region and record ``max |h_D - h_C|`` on each.

    Parameters
    ----------
    h_D : ndarray
        Full vertex function (closure values are used).
    h_C : HarmonicPolynomial
    j : int
        Dropped coordinate, 1-based.
    """
    rng = np.random.default_rng(seed)
    axis = j - 1
    y, pvol = _project_region_sampler(sub.region, axis, rng, n_samples)
    clo = sub.closure
    diff = np.zeros(t.n)
    diff[clo] = np.abs(np.asarray(h_D)[clo] - h_C(t.sites[clo]))
    colmax = np.zeros(len(y))
    e = t.edges
    hits = _column_edge_hits(t, sub.closure_edges, axis, y)
    for k, h in zip(sub.closure_edges, hits):
        if len(h):
            val = max(diff[e.u[k]], diff[e.v[k]])
            np.maximum.at(colmax, h, val)
    bb = sub.closure_bounding_box(t)
    M = h_C.hess_sup(bb)
    eps = sub.closure_epsilon(t)
    S = sub.sum_dual_volumes(t)
    ks = tuple(ks)
    thr = np.array([3.0 * k * M * eps * S for k in ks])
    meas = np.array([np.mean(colmax > th) * pvol for th in thr])
    return ColumnDiagnostic(j, y, colmax, ks, thr, meas, pvol, M, eps, S)


def sup_error_bound_2d(M, eps, vol, L, ks=None):
    """``inf_k 6 k M eps vol + 2 (sqrt(2) / k + eps) L`` over a k-grid.

    The closed-form minimizer is added to the grid.
    """
    if ks is None:
        ks = np.geomspace(1e-3, 1e6, 4001)
    ks = np.asarray(ks, dtype=float)
    if M * eps * vol > 0 and L > 0:
        ks = np.append(ks, math.sqrt(2 * math.sqrt(2) * L / (6 * M * eps * vol)))
    vals = 6 * ks * M * eps * vol + 2 * (math.sqrt(2) / ks + eps) * L
    i = int(np.argmin(vals))
    return float(vals[i]), float(ks[i])


def fit_decay_constant(errors, eps, M):
    """Single constant ``C`` in ``error ~ C max(M, 1) eps log(1/eps)``.

    Returns ``(C, ratios)`` where ``ratios`` are the per-level factors
    ``error / (C max(M,1) eps log(1/eps))``; ``C`` is their geometric-mean fit.
    """
    errors = np.asarray(errors, dtype=float)
    eps = np.asarray(eps, dtype=float)
    M = np.maximum(np.broadcast_to(np.asarray(M, dtype=float), errors.shape), 1.0)
    base = M * eps * np.log(1.0 / eps)
    r = errors / base
    C = float(np.exp(np.mean(np.log(r))))
    return C, r / C
