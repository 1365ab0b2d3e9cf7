"""Convex polytope primitives in two and three dimensions.

Cells are built by clipping an axis-aligned box against bisector half-spaces.
Every facet remembers which neighbouring site produced it, which is what
later turns a collection of cells into a weighted graph.

Labels
------
Facet labels ``>= 0`` are indices of the generating neighbour site.  Box
facets carry negative labels, see :func:`box_label`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegeneratePolytope, EmptyCell, NonPlanarLoop

__all__ = [
    "Box",
    "Facet",
    "Polytope",
    "box_label",
    "facet_area",
    "polytope_volume",
    "dual_polytope_volume",
    "cone_volume",
    "halfspace_cell",
    "box_polytope",
    "CellClipper",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``prod_i [lo_i, hi_i]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        if len(lo) != len(hi) or not lo:
            raise ValueError("box bounds must have equal nonzero length")
        if not all(math.isfinite(a) and math.isfinite(b) and a < b for a, b in zip(lo, hi)):
            raise ValueError(f"invalid box bounds lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def unit(cls, d):
        return cls((0.0,) * d, (1.0,) * d)

    @classmethod
    def from_pairs(cls, pairs):
        """Build from ``[[lo_1, hi_1], ..., [lo_d, hi_d]]``."""
        pairs = [tuple(p) for p in pairs]
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    def to_pairs(self):
        return [[a, b] for a, b in zip(self.lo, self.hi)]

    @property
    def dim(self):
        return len(self.lo)

    @property
    def lo_arr(self):
        return np.array(self.lo)

    @property
    def hi_arr(self):
        return np.array(self.hi)

    @property
    def sides(self):
        return self.hi_arr - self.lo_arr

    @property
    def diameter(self):
        return float(np.linalg.norm(self.sides))

    @property
    def volume(self):
        return float(np.prod(self.sides))

    @property
    def center(self):
        return 0.5 * (self.lo_arr + self.hi_arr)

    def contains(self, x, strict=False):
        x = np.asarray(x, dtype=float)
        if strict:
            return np.all((x > self.lo_arr) & (x < self.hi_arr), axis=-1)
        return np.all((x >= self.lo_arr) & (x <= self.hi_arr), axis=-1)


def box_label(axis, side):
    """Negative facet label of the box face ``x_axis = lo`` (side 0) or ``hi`` (side 1)."""
    return -(1 + 2 * axis + side)


def box_label_axis_side(label):
    k = -label - 1
    return k // 2, k % 2


@dataclass
class Facet:
    """Planar facet of a polytope.

    Attributes
    ----------
    points : ndarray, shape (k, d)
        Vertex loop. Two endpoints in 2D, an oriented polygon in 3D.
    normal : ndarray, shape (d,)
        Outward unit normal.
    area : float
        ``(d-1)``-dimensional measure.
    neighbor : int
        Generating site index, or a negative box label.
    indices : tuple of int, optional
        Positions of ``points`` in the parent polytope's vertex array.
    """

    points: np.ndarray
    normal: np.ndarray
    area: float
    neighbor: int = -1
    indices: Optional[tuple] = None

    @property
    def is_boundary(self):
        return self.neighbor < 0

    @property
    def centroid(self):
        return self.points.mean(axis=0)


@dataclass
class Polytope:
    vertices: np.ndarray
    facets: list
    volume: float = float("nan")

    @property
    def dim(self):
        return self.vertices.shape[1]

    @property
    def centroid(self):
        return self.vertices.mean(axis=0)

    @property
    def diameter(self):
        v = self.vertices
        diff = v[:, None, :] - v[None, :, :]
        return float(np.sqrt((diff**2).sum(-1).max()))

    def facet_by_neighbor(self):
        return {f.neighbor: f for f in self.facets}

    def touches_box(self):
        return any(f.neighbor < 0 for f in self.facets)


def _loop_scale(pts):
    return float(np.max(np.ptp(pts, axis=0))) if len(pts) else 0.0


def facet_area(f, tol_plane=None):
    """Measure of a facet recomputed from its vertex loop.

    Parameters
    ----------
    f : Facet
    tol_plane : float, optional
        Admissible distance of a loop vertex from the facet hyperplane.
        Defaults to ``1e-9`` times the loop extent.

    Returns
    -------
    float
        Segment length for ``d = 2``; fan-triangulated polygon area for ``d = 3``.

    Raises
    ------
    NonPlanarLoop
        If a vertex deviates from the hyperplane through the loop centroid.
    """
    pts = np.asarray(f.points, dtype=float)
    d = pts.shape[1]
    if d == 2:
        if len(pts) != 2:
            raise NonPlanarLoop("a 2D facet is a segment with two endpoints")
        return float(np.linalg.norm(pts[1] - pts[0]))
    if d != 3:
        raise ValueError("facet geometry is only implemented for d in {2, 3}")
    if len(pts) < 3:
        return 0.0
    c = pts.mean(axis=0)
    if tol_plane is None:
        tol_plane = 1e-9 * max(_loop_scale(pts), np.finfo(float).tiny)
    n = np.asarray(f.normal, dtype=float)
    dev = np.abs((pts - c) @ n)
    if dev.max() > tol_plane:
        raise NonPlanarLoop(f"loop vertex off its plane by {dev.max():.3e} > {tol_plane:.3e}")
    rel = pts - c
    cr = np.cross(rel, np.roll(rel, -1, axis=0))
    return float(0.5 * np.linalg.norm(cr, axis=1).sum())


def polytope_volume(p):
    """Volume by pyramids over facets with apex at the vertex centroid.

    Raises
    ------
    DegeneratePolytope
        If the vertices do not span ``d`` dimensions.
    """
    v = np.asarray(p.vertices, dtype=float)
    d = v.shape[1]
    if len(v) < d + 1:
        raise DegeneratePolytope(f"{len(v)} vertices cannot span {d} dimensions")
    c = v.mean(axis=0)
    s = np.linalg.svd(v - c, compute_uv=False)
    if s[0] == 0.0 or np.sum(s > 1e-12 * s[0]) < d:
        raise DegeneratePolytope("vertices are affinely dependent")
    total = 0.0
    for f in p.facets:
        total += f.area * float(np.dot(f.normal, f.points[0] - c))
    return total / d


def dual_polytope_volume(edge_length, facet_area, d):
    """Volume of the double cone over a facet, ``length * area / d``."""
    if not edge_length > 0:
        raise ValueError("edge_length must be positive")
    if facet_area < 0:
        raise ValueError("facet_area must be nonnegative")
    return edge_length * facet_area / d


def cone_volume(apex, points):
    """Volume of ``conv(apex, facet)`` by explicit simplex decomposition.

    Independent of :func:`dual_polytope_volume`; used as its oracle.
    """
    apex = np.asarray(apex, dtype=float)
    pts = np.asarray(points, dtype=float)
    if pts.shape[1] == 2:
        a, b = pts[0] - apex, pts[1] - apex
        return 0.5 * abs(a[0] * b[1] - a[1] * b[0])
    c = pts.mean(axis=0)
    total = 0.0
    for i in range(len(pts)):
        m = np.stack([pts[i] - apex, pts[(i + 1) % len(pts)] - apex, c - apex])
        total += abs(np.linalg.det(m))
    return total / 6.0


# ---------------------------------------------------------------------------
# clipping


class CellClipper:
    """Incrementally clipped convex cell in coordinates centred at its site.

    Parameters
    ----------
    site : array_like, shape (d,)
    box : Box
        The initial cell. ``site`` must lie inside it.
    """

    def __init__(self, site, box):
        self.site = np.asarray(site, dtype=float)
        self.d = len(self.site)
        if self.d not in (2, 3):
            raise ValueError("cells are only implemented for d in {2, 3}")
        if not box.contains(self.site):
            raise EmptyCell("site lies outside the box")
        lo = box.lo_arr - self.site
        hi = box.hi_arr - self.site
        self.normals = {}
        for a in range(self.d):
            e = np.zeros(self.d)
            e[a] = 1.0
            self.normals[box_label(a, 0)] = -e
            self.normals[box_label(a, 1)] = e
        if self.d == 2:
            self.V = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
            self.labels = [box_label(1, 0), box_label(0, 1), box_label(1, 1), box_label(0, 0)]
        else:
            self.V = np.array(
                [[(hi if (i >> a) & 1 else lo)[a] for a in range(3)] for i in range(8)]
            )
            self.faces = []
            for a in range(3):
                b, c = (a + 1) % 3, (a + 2) % 3
                for s in (0, 1):
                    loop = [
                        (s << a) | (ib << b) | (ic << c)
                        for ib, ic in ((0, 0), (1, 0), (1, 1), (0, 1))
                    ]
                    if s == 0:
                        loop.reverse()
                    self.faces.append((loop, box_label(a, s)))
        self._update_rmax()

    def _update_rmax(self):
        self.rmax = float(np.sqrt((self.V**2).sum(axis=1).max()))

    def clip_site(self, other, label):
        """Keep the half-space of points closer to the site than to ``other``."""
        q = np.asarray(other, dtype=float) - self.site
        nq = float(np.linalg.norm(q))
        if nq == 0.0:
            raise EmptyCell("coincident sites")
        return self.clip(q / nq, 0.5 * nq, label)

    def clip(self, n, c, label):
        """Intersect with ``{y : y . n <= c}``; ``n`` is a unit vector.

        Returns True if the cell changed.
        """
        if c > self.rmax * (1.0 + 1e-12):
            return False
        tol = 1e-12 * max(self.rmax, abs(c))
        dist = self.V @ n - c
        if dist.max() <= tol:
            return False
        if dist.min() > -tol:
            raise EmptyCell("half-space removes the whole cell")
        self.normals[label] = np.asarray(n, dtype=float)
        if self.d == 2:
            self._clip2(dist, tol, label)
        else:
            self._clip3(dist, tol, label)
        self._update_rmax()
        return True

    def _clip2(self, dist, tol, label):
        V, L = self.V, self.labels
        k = len(V)
        pts, src = [], []
        for i in range(k):
            j = (i + 1) % k
            di, dj = dist[i], dist[j]
            if di <= tol:
                pts.append(V[i])
                src.append(("v", i))
            if (di < -tol and dj > tol) or (di > tol and dj < -tol):
                t = di / (di - dj)
                pts.append(V[i] + t * (V[j] - V[i]))
                src.append(("x", i) if di < -tol else ("y", i))
        m = len(pts)
        if m < 3:
            raise EmptyCell("clipped polygon is degenerate")
        labels = []
        for a in range(m):
            ka, ia = src[a]
            kb, ib = src[(a + 1) % m]
            nxt = (ia + 1) % k
            if ka == "v" and ((kb == "v" and ib == nxt) or (kb in "xy" and ib == ia)):
                labels.append(L[ia])
            elif ka == "y" and kb == "v" and ib == nxt:
                labels.append(L[ia])
            else:
                labels.append(label)
        self.V = np.array(pts)
        self.labels = labels

    def _clip3(self, dist, tol, label):
        V = self.V
        out = dist > tol
        inside = dist < -tol
        keep = ~out
        new_pts = [V[i] for i in range(len(V)) if keep[i]]
        remap = -np.ones(len(V), dtype=int)
        remap[keep] = np.arange(int(keep.sum()))
        cache = {}
        on_plane = [int(remap[i]) for i in range(len(V)) if keep[i] and not inside[i]]

        def cross(i, j):
            key = (i, j) if i < j else (j, i)
            idx = cache.get(key)
            if idx is None:
                t = dist[i] / (dist[i] - dist[j])
                new_pts.append(V[i] + t * (V[j] - V[i]))
                idx = len(new_pts) - 1
                cache[key] = idx
                on_plane.append(idx)
            return idx

        faces = []
        for loop, lab in self.faces:
            nl = []
            k = len(loop)
            for a in range(k):
                i, j = loop[a], loop[(a + 1) % k]
                if keep[i]:
                    nl.append(int(remap[i]))
                if (inside[i] and out[j]) or (out[i] and inside[j]):
                    nl.append(cross(i, j))
            # collapse repeated consecutive indices
            nl = [x for a, x in enumerate(nl) if x != nl[a - 1]] if len(nl) > 1 else nl
            if len(nl) >= 3:
                faces.append((nl, lab))
        P = np.array(new_pts)
        on_plane = sorted(set(on_plane))
        if len(on_plane) >= 3:
            n = self.normals[label]
            pc = P[on_plane]
            c = pc.mean(axis=0)
            u = pc[np.argmax(((pc - c) ** 2).sum(1))] - c
            u -= np.dot(u, n) * n
            u /= np.linalg.norm(u)
            w = np.cross(n, u)
            ang = np.arctan2((pc - c) @ w, (pc - c) @ u)
            order = np.argsort(ang, kind="stable")
            faces.append(([on_plane[i] for i in order], label))
        used = sorted({i for loop, _ in faces for i in loop})
        if len(used) < 4:
            raise EmptyCell("clipped polyhedron is degenerate")
        compact = {old: new for new, old in enumerate(used)}
        self.V = P[used]
        self.faces = [([compact[i] for i in loop], lab) for loop, lab in faces]

    def polytope(self, tol_area=0.0):
        """Finalize into a :class:`Polytope` in global coordinates.

        Facets of measure below ``tol_area`` are dropped.
        """
        V = self.V + self.site
        facets = []
        if self.d == 2:
            k = len(V)
            for i in range(k):
                j = (i + 1) % k
                lab = self.labels[i]
                pts = V[[i, j]]
                area = float(np.linalg.norm(self.V[j] - self.V[i]))
                if area < tol_area or area == 0.0:
                    continue
                facets.append(Facet(pts, self.normals[lab], area, int(lab), (i, j)))
        else:
            for loop, lab in self.faces:
                rel = self.V[loop]
                c = rel.mean(axis=0)
                cr = np.cross(rel - c, np.roll(rel - c, -1, axis=0))
                area = float(0.5 * np.linalg.norm(cr, axis=1).sum())
                if area < tol_area or area == 0.0:
                    continue
                facets.append(Facet(V[loop], self.normals[lab], area, int(lab), tuple(loop)))
        p = Polytope(V, facets)
        p.volume = _local_volume(self.V, facets, self.d)
        return p


def _local_volume(Vloc, facets, d):
    c = Vloc.mean(axis=0)
    total = 0.0
    for f in facets:
        total += f.area * float(np.dot(f.normal, Vloc[f.indices[0]] - c))
    return total / d


def halfspace_cell(site, others, box, tol_area=None):
    """Cell of ``site`` inside ``box`` bounded by bisectors with ``others``.

    Parameters
    ----------
    site : array_like, shape (d,)
    others : array_like, shape (n, d)
        Competing sites, distinct from ``site``. Facets are labelled by
        position in this array.
    box : Box
    tol_area : float, optional
        Facets smaller than this are dropped. Defaults to
        ``1e-12 * box.diameter ** (d - 1)``.

    Returns
    -------
    Polytope

    Raises
    ------
    EmptyCell
        If the site is outside the box or the input is degenerate.
    """
    site = np.asarray(site, dtype=float)
    others = np.asarray(others, dtype=float).reshape(-1, len(site))
    if tol_area is None:
        tol_area = 1e-12 * box.diameter ** (len(site) - 1)
    clip = CellClipper(site, box)
    if len(others):
        rel = others - site
        d2 = (rel**2).sum(axis=1)
        # canonical order: the result does not depend on the input order
        keys = [rel[:, a] for a in range(rel.shape[1] - 1, -1, -1)] + [d2]
        for k in np.lexsort(keys):
            if 0.5 * math.sqrt(d2[k]) > clip.rmax * (1.0 + 1e-12):
                break
            clip.clip_site(others[k], int(k))
    return clip.polytope(tol_area)


def box_polytope(lo, hi, labels=None):
    """Axis-aligned box cell with facet labels ``labels[(axis, side)]``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    box = Box(tuple(lo), tuple(hi))
    clip = CellClipper(0.5 * (lo + hi), box)
    if labels:
        if clip.d == 2:
            clip.labels = [labels.get(box_label_axis_side(l), l) for l in clip.labels]
        else:
            clip.faces = [(loop, labels.get(box_label_axis_side(l), l)) for loop, l in clip.faces]
        for key, lab in labels.items():
            clip.normals[lab] = clip.normals[box_label(*key)]
    return clip.polytope()
