"""Finite-volume operators on a conductance graph.

Sign conventions
----------------
An :class:`EdgeField` stores one value per undirected edge ``k`` with
endpoints ``(u_k, v_k)``; the stored number is the value on the directed edge
``(u_k, v_k)`` and the reversed edge reads its negative.  Gradients follow
``grad f(w, v) = f(w) - f(v)`` and the divergence at ``v`` sums the values of
all directed edges ``(w, v)`` ending at ``v``, so that
``div(a grad f) = laplacian_apply(f) = sum_w a(w, v) (f(w) - f(v))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInterior, InfeasibleTheta
from .geometry import Box

__all__ = [
    "Ball",
    "EdgeField",
    "SubdomainIndex",
    "subdomain",
    "gradient",
    "conductance_gradient",
    "divergence",
    "laplacian_apply",
    "dirichlet_energy",
    "facet_flux",
    "cell_flux_sum",
    "EnergyVerdict",
    "dual_feasible_energy_bound",
    "gradient_energy_check",
    "directed_divergence_pairing",
    "INEQUALITY_SLACK",
]

INEQUALITY_SLACK = 1e-9


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radius", float(self.radius))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    @property
    def dim(self):
        return len(self.center)

    def contains(self, x, strict=False):
        x = np.asarray(x, dtype=float)
        r2 = ((x - np.asarray(self.center)) ** 2).sum(axis=-1)
        return r2 < self.radius**2 if strict else r2 <= self.radius**2

    @property
    def bounding_box(self):
        c = np.asarray(self.center)
        return Box(tuple(c - self.radius), tuple(c + self.radius))


def region_bounding_box(U):
    return U.bounding_box if isinstance(U, Ball) else U


@dataclass
class EdgeField:
    """Antisymmetric edge function stored once per undirected edge."""

    values: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __call__(self, w, x, index=None):
        """Value on the directed edge ``(w, x)``."""
        if index is None:
            lo, hi = (w, x) if w < x else (x, w)
            k = int(np.flatnonzero((self.u == lo) & (self.v == hi))[0])
        else:
            k = index[(min(w, x), max(w, x))]
        return self.values[k] if w == self.u[k] else -self.values[k]

    def __add__(self, other):
        return EdgeField(self.values + other.values, self.u, self.v)

    def __sub__(self, other):
        return EdgeField(self.values - other.values, self.u, self.v)


@dataclass
class SubdomainIndex:
    """Interior, boundary and edge sets of a region.

    Attributes
    ----------
    interior, boundary : ndarray of int
        Sites strictly inside ``region``; outside sites adjacent to them.
    interior_edges, boundary_edges, closure_edges : ndarray of int
        Edge positions with both endpoints interior, with exactly one, and
        their union.
    closure_volume : float
        Volume of the union of closure cells (``nan`` without cells).
    clipped : ndarray of int
        Closure sites whose cells touch the sampling box.
    """

    region: object
    n: int
    interior: np.ndarray
    boundary: np.ndarray
    interior_edges: np.ndarray
    boundary_edges: np.ndarray
    closure_edges: np.ndarray
    closure_volume: float
    clipped: np.ndarray

    @property
    def closure(self):
        return np.union1d(self.interior, self.boundary)

    @property
    def interior_mask(self):
        m = np.zeros(self.n, dtype=bool)
        m[self.interior] = True
        return m

    @property
    def boundary_mask(self):
        m = np.zeros(self.n, dtype=bool)
        m[self.boundary] = True
        return m

    def closure_epsilon(self, t):
        """``sup`` of cell diameters over the closure."""
        return float(t.cell_diameters[self.closure].max())

    def closure_bounding_box(self, t):
        """Bounding box of the closure cells."""
        verts = np.vstack([t.cells[i].vertices for i in self.closure])
        return Box(tuple(verts.min(axis=0)), tuple(verts.max(axis=0)))

    def sum_dual_volumes(self, t):
        """``sum_{e in closure edges} d vol(Q_e)``."""
        return float(t.dim * t.edges.qe_volume[self.closure_edges].sum())


def subdomain(t, U):
    """Index sets of region ``U`` (a :class:`Box` or :class:`Ball`).

    Raises
    ------
    EmptyInterior
        If no site lies strictly inside ``U``.
    ValueError
        If the closure of ``U`` is not strictly inside the tiling's box.
    """
    box = getattr(t, "domain_box", None)
    if box is not None:
        bb = region_bounding_box(U)
        if not (np.all(bb.lo_arr > box.lo_arr) and np.all(bb.hi_arr < box.hi_arr)):
            raise ValueError("region must lie strictly inside the tiling box")
    inside = np.asarray(U.contains(t.sites, strict=True), dtype=bool)
    interior = np.flatnonzero(inside)
    if len(interior) == 0:
        raise EmptyInterior("no site lies inside the region")
    e = t.edges
    iu, iv = inside[e.u], inside[e.v]
    both = iu & iv
    one = iu ^ iv
    bmask = np.zeros(t.n, dtype=bool)
    bmask[e.u[one & ~iu]] = True
    bmask[e.v[one & ~iv]] = True
    boundary = np.flatnonzero(bmask)
    closure = np.flatnonzero(inside | bmask)
    if hasattr(t, "cells"):
        vol = float(t.cell_volumes[closure].sum())
        clipped = closure[t.touches_box[closure]]
    else:
        vol = float("nan")
        clipped = np.array([], dtype=np.int64)
    return SubdomainIndex(
        U,
        t.n,
        interior,
        boundary,
        np.flatnonzero(both),
        np.flatnonzero(one),
        np.flatnonzero(iu | iv),
        vol,
        clipped,
    )


# ---------------------------------------------------------------------------
# operators


def gradient(t, f):
    f = np.asarray(f, dtype=float)
    e = t.edges
    return EdgeField(f[e.u] - f[e.v], e.u, e.v)


def conductance_gradient(t, f):
    g = gradient(t, f)
    return EdgeField(t.edges.conductance * g.values, g.u, g.v)


def divergence(t, theta):
    """Sum of the directed-edge values ending at each vertex."""
    n = t.n
    vals = theta.values if isinstance(theta, EdgeField) else np.asarray(theta)
    e = t.edges
    return np.bincount(e.v, vals, n) - np.bincount(e.u, vals, n)


def laplacian_apply(t, f):
    """``sum_w a(w, v) (f(w) - f(v))`` at every vertex."""
    return -(t.laplacian_matrix @ np.asarray(f, dtype=float))


def dirichlet_energy(t, sub, f):
    """``sum_{e in closure edges} a(e) |grad f(e)|^2``."""
    f = np.asarray(f, dtype=float)
    e = t.edges
    k = sub.closure_edges
    g = f[e.u[k]] - f[e.v[k]]
    return float(np.sum(e.conductance[k] * g * g))


def directed_divergence_pairing(t, sub, theta, f):
    """Both sides of the discrete divergence identity on the interior.

    Returns ``(sum_{v in A} div theta(v) f(v), -1/2 sum over directed closure
    edges of theta grad f)``; the directed sum visits every closure edge in
    both orientations.  The two agree when ``f`` vanishes on ``sub.boundary``.
    """
    f = np.asarray(f, dtype=float)
    vals = theta.values if isinstance(theta, EdgeField) else np.asarray(theta)
    div = divergence(t, vals)
    lhs = float(np.dot(div[sub.interior], f[sub.interior]))
    e = t.edges
    k = sub.closure_edges
    g = f[e.u[k]] - f[e.v[k]]
    directed = np.concatenate([vals[k] * g, (-vals[k]) * (-g)])
    return lhs, float(-0.5 * directed.sum())


def _fan_points(points, d):
    """Quadrature nodes and weights: coarse centroid rule and one refinement."""
    if d == 2:
        a, b = points
        L = float(np.linalg.norm(b - a))
        coarse = (np.array([0.5 * (a + b)]), np.array([L]))
        fine = (np.array([0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b]), np.array([0.5 * L, 0.5 * L]))
        return coarse, fine
    c = points.mean(axis=0)
    nxt = np.roll(points, -1, axis=0)
    tri = np.stack([np.broadcast_to(c, points.shape), points, nxt], axis=1)  # (k, 3, 3)
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    coarse = (tri.mean(axis=1), area)
    m01 = 0.5 * (tri[:, 0] + tri[:, 1])
    m12 = 0.5 * (tri[:, 1] + tri[:, 2])
    m20 = 0.5 * (tri[:, 2] + tri[:, 0])
    subs = [
        (tri[:, 0], m01, m20),
        (m01, tri[:, 1], m12),
        (m20, m12, tri[:, 2]),
        (m01, m12, m20),
    ]
    nodes = np.concatenate([(p + q + r) / 3.0 for p, q, r in subs])
    weights = np.concatenate([area / 4.0] * 4)
    return coarse, (nodes, weights)


def _flux_over(grad_h, points, normal, d):
    (xc, wc), (xf, wf) = _fan_points(np.asarray(points, dtype=float), d)
    gc = np.atleast_2d(grad_h(xc))
    gf = np.atleast_2d(grad_h(xf))
    coarse = float(np.dot(wc, gc @ normal))
    fine = float(np.dot(wf, gf @ normal))
    return fine, abs(fine - coarse) / 3.0


def facet_flux(grad_h, e, t, return_error=False):
    """Flux of ``grad_h`` through the facet of edge ``e``, out of cell ``e.u``.

    The integrand is integrated by the centroid rule on the facet fan and on
    its one-step refinement; the refined value is returned, and with
    ``return_error`` also the Richardson error estimate ``|fine - coarse| / 3``.

    Parameters
    ----------
    grad_h : callable
        Maps an ``(k, d)`` array of points to ``(k, d)`` gradients.
    e : EdgeRecord or int
    t : Tiling
    """
    if isinstance(e, (int, np.integer)):
        e = t.edges[int(e)]
    f = t.facet(e.u, e.v) or t.facet(e.v, e.u)
    n = t.sites[e.v] - t.sites[e.u]
    n = n / np.linalg.norm(n)
    val, err = _flux_over(grad_h, f.points, n, t.dim)
    return (val, err) if return_error else val


def cell_flux_sum(grad_h, t, i):
    """Total outward flux of ``grad_h`` through all facets of cell ``i``."""
    total, err = 0.0, 0.0
    for f in t.cells[i].facets:
        v, e = _flux_over(grad_h, f.points, np.asarray(f.normal), t.dim)
        total += v
        err += e
    return total, err


@dataclass
class EnergyVerdict:
    lhs: float
    rhs: float
    div_mismatch: float
    holds: bool


def dual_feasible_energy_bound(t, sub, f, theta, tol=1e-8):
    """Compare the energy of ``f`` with that of a flow of the same divergence.

    Checks ``sum a^{-1} |a grad f|^2 <= sum a^{-1} theta^2`` over closure edges
    for any ``theta`` whose divergence matches ``div(a grad f)`` on the
    interior.

    Raises
    ------
    InfeasibleTheta
        If the divergences differ by more than ``tol`` (relative to the
        largest divergence of ``a grad f``), or ``f`` is nonzero on the boundary.
    """
    f = np.asarray(f, dtype=float)
    if np.any(f[sub.boundary] != 0.0):
        raise InfeasibleTheta("f must vanish on the boundary")
    vals = theta.values if isinstance(theta, EdgeField) else np.asarray(theta, dtype=float)
    ga = conductance_gradient(t, f)
    d1 = divergence(t, ga)[sub.interior]
    d2 = divergence(t, vals)[sub.interior]
    scale = max(1.0, float(np.abs(d1).max()))
    mismatch = float(np.abs(d1 - d2).max())
    if mismatch > tol * scale:
        raise InfeasibleTheta(f"divergence mismatch {mismatch:.3e}")
    k = sub.closure_edges
    a = t.edges.conductance[k]
    lhs = float(np.sum(ga.values[k] ** 2 / a))
    rhs = float(np.sum(vals[k] ** 2 / a))
    return EnergyVerdict(lhs, rhs, mismatch, lhs <= rhs + INEQUALITY_SLACK)


def gradient_energy_check(t, sub, f, delta=None):
    """Dual volume of steep closure edges against the Dirichlet energy.

    Returns ``(sum d vol(Q_e) 1{|grad f(e)| > delta}, D(f, A), delta)``;
    ``delta`` defaults to the longest closure edge.
    """
    f = np.asarray(f, dtype=float)
    e = t.edges
    k = sub.closure_edges
    if delta is None:
        delta = float(e.length[k].max())
    g = np.abs(f[e.u[k]] - f[e.v[k]])
    lhs = float(t.dim * e.qe_volume[k][g > delta].sum())
    return lhs, dirichlet_energy(t, sub, f), delta
