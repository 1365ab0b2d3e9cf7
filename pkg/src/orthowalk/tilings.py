"""Orthogonal tilings and the sphere-tangency counterexample graph.

A :class:`Tiling` couples a site set with convex cells and the weighted edge
table they induce: an edge joins two sites whose cells share a facet, and
carries the conductance ``facet_area / length``.  Both :class:`Tiling` and
:class:`CombinatorialGraph` expose the same graph attributes (``sites``,
``edges``, ``n``), which is all the solvers and walks need.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .errors import DegenerateInput, InvalidPeriod, NonDivisibleSpacing
from .geometry import Box, CellClipper, box_polytope

__all__ = [
    "EdgeRecord",
    "EdgeTable",
    "Tiling",
    "CombinatorialGraph",
    "HypothesisReport",
    "OrthogonalityReport",
    "build_grid_tiling",
    "build_voronoi_tiling",
    "build_counterexample_graph",
    "validate_orthogonality",
    "nearest_vertex",
    "hypothesis_report",
    "TOL_ANGLE",
]

TOL_ANGLE = 1e-8


@dataclass(frozen=True)
class EdgeRecord:
    u: int
    v: int
    length: float
    facet_area: float
    conductance: float
    qe_volume: float


@dataclass
class EdgeTable:
    """Undirected edges as parallel arrays, sorted by ``(u, v)`` with ``u < v``."""

    u: np.ndarray
    v: np.ndarray
    length: np.ndarray
    facet_area: np.ndarray
    conductance: np.ndarray
    qe_volume: np.ndarray

    def __len__(self):
        return len(self.u)

    def __getitem__(self, k):
        return EdgeRecord(
            int(self.u[k]),
            int(self.v[k]),
            float(self.length[k]),
            float(self.facet_area[k]),
            float(self.conductance[k]),
            float(self.qe_volume[k]),
        )

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @cached_property
    def index(self):
        """Map ``(min, max)`` endpoint pair to edge position."""
        return {(int(a), int(b)): k for k, (a, b) in enumerate(zip(self.u, self.v))}

    def find(self, a, b):
        return self.index[(a, b) if a < b else (b, a)]


class _GraphMixin:
    """Sparse views shared by tilings and combinatorial graphs."""

    @property
    def n(self):
        return len(self.sites)

    @cached_property
    def conductance_matrix(self):
        e = self.edges
        a = sp.coo_matrix((e.conductance, (e.u, e.v)), shape=(self.n, self.n))
        return (a + a.T).tocsr()

    @cached_property
    def total_conductance(self):
        """``a(v) = sum_w a(v, w)``."""
        e = self.edges
        return np.bincount(e.u, e.conductance, self.n) + np.bincount(e.v, e.conductance, self.n)

    @cached_property
    def laplacian_matrix(self):
        """Positive semidefinite ``D - A``; ``-L f`` is the geometric Laplacian."""
        return (sp.diags(self.total_conductance) - self.conductance_matrix).tocsr()

    @cached_property
    def degree(self):
        e = self.edges
        return np.bincount(e.u, minlength=self.n) + np.bincount(e.v, minlength=self.n)

    def neighbors(self, v):
        A = self.conductance_matrix
        return A.indices[A.indptr[v]:A.indptr[v + 1]]


@dataclass
class Tiling(_GraphMixin):
    """Sites, convex cells and the induced conductance graph.

    Attributes
    ----------
    dim : int
    sites : ndarray, shape (n, d)
    cells : list of Polytope
    edges : EdgeTable
    domain_box : Box
    meta : dict
        Generator name, seed and similar provenance of the construction.
    """

    dim: int
    sites: np.ndarray
    cells: list
    edges: EdgeTable
    domain_box: Box
    meta: dict = field(default_factory=dict)

    @cached_property
    def cell_diameters(self):
        return np.array([c.diameter for c in self.cells])

    @cached_property
    def cell_volumes(self):
        return np.array([c.volume for c in self.cells])

    @cached_property
    def touches_box(self):
        return np.array([c.touches_box() for c in self.cells], dtype=bool)

    @property
    def epsilon(self):
        """Largest cell diameter."""
        return float(self.cell_diameters.max())

    @cached_property
    def kdtree(self):
        return cKDTree(self.sites)

    def facet(self, u, v):
        """Facet of cell ``u`` generated by neighbour ``v`` (None if absent)."""
        for f in self.cells[u].facets:
            if f.neighbor == v:
                return f
        return None


@dataclass
class CombinatorialGraph(_GraphMixin):
    """Graph with vertex positions and unit conductances."""

    sites: np.ndarray
    edges: EdgeTable
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.sites.shape[1]


def _edge_table(u, v, length, area):
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    length = np.asarray(length, dtype=float)
    area = np.asarray(area, dtype=float)
    order = np.lexsort((v, u))
    u, v, length, area = u[order], v[order], length[order], area[order]
    return EdgeTable(u, v, length, area, area / length, np.full(len(u), np.nan))


def _finish_edges(u, v, length, area, d):
    e = _edge_table(u, v, length, area)
    e.qe_volume = e.length * e.facet_area / d
    return e


# ---------------------------------------------------------------------------
# constructors


def build_grid_tiling(box, h):
    """Regular grid of cubes of side ``h`` with sites at the cube centres.

    Raises
    ------
    NonDivisibleSpacing
        If ``h`` does not divide every side of ``box``.
    """
    if not isinstance(box, Box):
        box = Box.from_pairs(box)
    d = box.dim
    if d not in (2, 3):
        raise ValueError("grid tilings are built for d in {2, 3}")
    if not h > 0:
        raise NonDivisibleSpacing("spacing must be positive")
    counts = []
    for side in box.sides:
        k = int(round(side / h))
        if k < 1 or abs(k * h - side) > 1e-12 * max(side, 1.0):
            raise NonDivisibleSpacing(f"h={h} does not divide side {side}")
        counts.append(k)
    shape = tuple(counts)
    idx = np.indices(shape).reshape(d, -1).T
    lo = box.lo_arr
    sites = lo + (idx + 0.5) * h
    flat = np.arange(len(idx)).reshape(shape)
    cells = []
    for i, ii in enumerate(idx):
        labels = {}
        for a in range(d):
            if ii[a] > 0:
                nb = list(ii)
                nb[a] -= 1
                labels[(a, 0)] = int(flat[tuple(nb)])
            if ii[a] < shape[a] - 1:
                nb = list(ii)
                nb[a] += 1
                labels[(a, 1)] = int(flat[tuple(nb)])
        cells.append(box_polytope(lo + ii * h, lo + (ii + 1) * h, labels))
    us, vs = [], []
    for a in range(d):
        sl_lo = [slice(None)] * d
        sl_hi = [slice(None)] * d
        sl_lo[a] = slice(0, -1)
        sl_hi[a] = slice(1, None)
        us.append(flat[tuple(sl_lo)].ravel())
        vs.append(flat[tuple(sl_hi)].ravel())
    u = np.concatenate(us)
    v = np.concatenate(vs)
    edges = _finish_edges(u, v, np.full(len(u), h), np.full(len(u), h ** (d - 1)), d)
    return Tiling(d, sites, cells, edges, box, {"generator": "grid", "h": h})


def build_voronoi_tiling(points, box, tol_area=None, meta=None):
    """Voronoi tiling of ``box`` generated by ``points``.

    Each cell is clipped against candidate neighbours in order of distance.
    Candidates come from a k-d tree query whose radius starts at four times
    the mean spacing and doubles until the cell is certified: once all sites
    within ``r`` are processed and ``2 * max|vertex - site| < r``, no further
    site can cut the cell.

    Parameters
    ----------
    points : array_like, shape (n, d) or PointCloud
    box : Box
    tol_area : float, optional
        Facets below this measure produce no edge. Defaults to
        ``1e-12 * box.diameter ** (d - 1)``.

    Raises
    ------
    DegenerateInput
        Fewer than ``d + 1`` points, coincident points, points outside the
        box, or all points in a common hyperplane.
    """
    if not isinstance(box, Box):
        box = Box.from_pairs(box)
    raw = getattr(points, "points", points)
    P = np.ascontiguousarray(raw, dtype=float)
    n, d = P.shape
    if d != box.dim:
        raise DegenerateInput("point dimension does not match the box")
    if n < d + 1:
        raise DegenerateInput(f"need at least {d + 1} points, got {n}")
    if not np.all(box.contains(P)):
        raise DegenerateInput("points must lie inside the box")
    c = P - P.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] == 0.0 or np.sum(s > 1e-12 * s[0]) < d:
        raise DegenerateInput("points lie in a common hyperplane")
    tree = cKDTree(P)
    dd, _ = tree.query(P, k=2)
    if np.any(dd[:, 1] == 0.0):
        raise DegenerateInput("coincident points")
    if tol_area is None:
        tol_area = 1e-12 * box.diameter ** (d - 1)

    spacing = (box.volume / n) ** (1.0 / d)
    clippers = [CellClipper(P[i], box) for i in range(n)]
    done_r = np.zeros(n)
    pending = np.arange(n)
    r = 4.0 * spacing
    while len(pending):
        lists = tree.query_ball_point(P[pending], r, return_sorted=False)
        still = []
        for i, cand in zip(pending, lists):
            cl = clippers[i]
            cand = np.asarray(cand, dtype=np.int64)
            rel = P[cand] - P[i]
            d2 = np.einsum("ij,ij->i", rel, rel)
            sel = (d2 > done_r[i] ** 2) & (cand != i)
            cand, rel, d2 = cand[sel], rel[sel], d2[sel]
            order = np.lexsort([rel[:, a] for a in range(d - 1, -1, -1)] + [d2])
            for k in order:
                if 0.5 * math.sqrt(d2[k]) > cl.rmax * (1.0 + 1e-12):
                    break
                cl.clip_site(P[cand[k]], int(cand[k]))
            done_r[i] = r
            if not 2.0 * cl.rmax * (1.0 + 1e-12) < r:
                still.append(i)
        pending = np.asarray(still, dtype=np.int64)
        r *= 2.0
    cells = [cl.polytope(tol_area) for cl in clippers]

    areas = {}
    for i, cell in enumerate(cells):
        for f in cell.facets:
            j = f.neighbor
            if j < 0:
                continue
            key = (i, j) if i < j else (j, i)
            areas.setdefault(key, []).append(f.area)
    keys = sorted(areas)
    u = np.array([k[0] for k in keys], dtype=np.int64)
    v = np.array([k[1] for k in keys], dtype=np.int64)
    area = np.array([sum(areas[k]) / len(areas[k]) for k in keys])
    length = np.linalg.norm(P[u] - P[v], axis=1)
    edges = _finish_edges(u, v, length, area, d)
    info = {"generator": "voronoi"}
    if meta:
        info.update(meta)
    return Tiling(d, P, cells, edges, box, info)


def build_counterexample_graph(d, N, T):
    """Tangency graph of the big/small sphere packing.

    Big spheres (radius 1) sit at ``2 z`` for integer ``z`` with
    ``-2N <= x_1 <= 0``; small spheres (radius 1/2) sit at
    ``(sqrt(7)/2, 1/2, 1/2, 0, ...) + y`` for integer ``y`` with
    ``0 <= y_1 <= 2N``.  Transverse coordinates are wrapped on a torus of
    period ``2T`` (``T`` big and ``2T`` small spheres per transverse axis).
    Adjacency is read off centre distances: two spheres are adjacent when
    their centres are at distance ``r_1 + r_2`` (to within ``1e-9``).

    Returns
    -------
    CombinatorialGraph
        ``meta`` holds ``kind`` (0 big, 1 small), ``layer`` (``x_1`` or
        ``y_1``), the absorbing sets ``A`` (big layer ``-2N``) and ``B``
        (small layer ``2N``), and a default ``start`` in the big middle layer.

    Raises
    ------
    InvalidPeriod
        If the wrap is too short to keep contacts distinct.
    """
    if d < 3:
        raise ValueError("the construction needs d >= 3")
    if N < 1:
        raise ValueError("N must be positive")
    if int(T) != T or T < 3:
        raise InvalidPeriod(f"transverse period 2T={2 * T} would merge distinct contacts")
    T = int(T)
    period = 2.0 * T
    tr = d - 1
    big_tr = np.indices((T,) * tr).reshape(tr, -1).T * 2
    small_tr = np.indices((2 * T,) * tr).reshape(tr, -1).T
    big_layers = np.arange(-2 * N, 1, 2)
    small_layers = np.arange(0, 2 * N + 1)
    big = np.array([[x1, *t] for x1 in big_layers for t in big_tr], dtype=float)
    off = np.zeros(d)
    off[0] = math.sqrt(7.0) / 2.0
    off[1] = off[2] = 0.5
    small = np.array([[y1, *t] for y1 in small_layers for t in small_tr], dtype=float) + off
    small[:, 1:] %= period
    nb = len(big)
    pos = np.vstack([big, small])
    kind = np.r_[np.zeros(nb, dtype=np.int8), np.ones(len(small), dtype=np.int8)]
    layer = np.r_[big[:, 0], (small[:, 0] - off[0])].round().astype(np.int64)

    shift = 2.0 * N + 2.0
    boxsize = np.r_[8.0 * N + 16.0, np.full(tr, period)]

    def tree(x):
        y = x.copy()
        y[:, 0] += shift
        return cKDTree(y, boxsize=boxsize)

    tb, ts = tree(big), tree(small)
    pairs = []
    for t1, t2, o1, o2, r in ((tb, tb, 0, 0, 2.0), (ts, ts, nb, nb, 1.0), (tb, ts, 0, nb, 1.5)):
        if t1 is t2:
            pr = t1.query_pairs(r + 1e-6, output_type="ndarray")
        else:
            lst = t1.query_ball_tree(t2, r + 1e-6)
            pr = np.array([(i, j) for i, js in enumerate(lst) for j in js], dtype=np.int64).reshape(-1, 2)
        if len(pr) == 0:
            continue
        a, b = pr[:, 0] + o1, pr[:, 1] + o2
        delta = pos[a] - pos[b]
        delta[:, 1:] -= period * np.round(delta[:, 1:] / period)
        dist = np.linalg.norm(delta, axis=1)
        ok = np.abs(dist - r) <= 1e-9
        pairs.append(np.stack([a[ok], b[ok], dist[ok]], axis=1))
    allp = np.vstack(pairs)
    u = allp[:, 0].astype(np.int64)
    v = allp[:, 1].astype(np.int64)
    if np.any(u == v):
        raise InvalidPeriod("torus wrap creates a self-adjacency")
    lo, hi = np.minimum(u, v), np.maximum(u, v)
    if len(np.unique(lo * len(pos) + hi)) != len(lo):
        raise InvalidPeriod("torus wrap creates a repeated adjacency")
    ones = np.ones(len(lo))
    e = _edge_table(lo, hi, allp[:, 2], ones)
    e.conductance = np.ones(len(lo))
    e.facet_area = np.full(len(lo), np.nan)
    A = np.flatnonzero((kind == 0) & (layer == -2 * N))
    B = np.flatnonzero((kind == 1) & (layer == 2 * N))
    start = int(np.flatnonzero((kind == 0) & (layer == 0))[0])
    meta = {
        "generator": "counterexample",
        "d": d,
        "N": N,
        "T": T,
        "kind": kind,
        "layer": layer,
        "A": A,
        "B": B,
        "start": start,
    }
    return CombinatorialGraph(pos, e, meta)


# ---------------------------------------------------------------------------
# validation


@dataclass
class OrthogonalityReport:
    max_angle: float
    worst_edge: Optional[int]
    site_defect: float
    worst_site: Optional[int]
    tol_angle: float = TOL_ANGLE

    @property
    def passed(self):
        return bool(self.max_angle <= self.tol_angle and self.site_defect < 0.0)


def _geometric_normal(points, d):
    if d == 2:
        t = points[1] - points[0]
        return np.array([t[1], -t[0]])
    c = points.mean(axis=0)
    rel = points - c
    return np.cross(rel, np.roll(rel, -1, axis=0)).sum(axis=0)


def validate_orthogonality(t, tol_angle=TOL_ANGLE):
    """Angle between each edge and its facet normal, plus site containment.

    The facet normal is recomputed from the facet's vertex loop, so a site
    moved after construction shows up as an angle defect.  ``site_defect``
    is the largest signed distance of a site beyond its own facets; it must
    be negative for every site to lie in the interior of its cell.
    """
    d = t.dim
    max_angle, worst = 0.0, None
    tol_area = 1e-12 * t.domain_box.diameter ** (d - 1)
    index = t.edges.index
    for i, cell in enumerate(t.cells):
        for f in cell.facets:
            j = f.neighbor
            if j < 0 or f.area < tol_area:
                continue
            nrm = _geometric_normal(f.points, d)
            w = t.sites[j] - t.sites[i]
            cr = np.linalg.norm(np.cross(w, nrm)) if d == 3 else abs(w[0] * nrm[1] - w[1] * nrm[0])
            ang = math.atan2(cr, abs(float(np.dot(w, nrm))))
            if ang > max_angle:
                max_angle = ang
                worst = index.get((min(i, j), max(i, j)))
    defect, wsite = -math.inf, None
    for i, cell in enumerate(t.cells):
        for f in cell.facets:
            s = float(np.dot(f.normal, t.sites[i] - f.points[0]))
            if s > defect:
                defect, wsite = s, i
    return OrthogonalityReport(max_angle, worst, defect, wsite, tol_angle)


def nearest_vertex(t, z):
    """Index of the site closest to ``z``; ties go to the lexicographically smallest site."""
    z = np.asarray(z, dtype=float)
    tree = t.kdtree if hasattr(t, "kdtree") else cKDTree(t.sites)
    dist, _ = tree.query(z)
    cand = tree.query_ball_point(z, dist * (1 + 1e-9) + 1e-300)
    cand = np.asarray(sorted(cand), dtype=np.int64)
    d2 = ((t.sites[cand] - z) ** 2).sum(axis=1)
    ties = cand[d2 == d2.min()]
    if len(ties) == 1:
        return int(ties[0])
    pts = t.sites[ties]
    order = np.lexsort([pts[:, a] for a in range(pts.shape[1] - 1, -1, -1)])
    return int(ties[order[0]])


@dataclass
class HypothesisReport:
    """Finite-scale readings of the smallness, volume and diameter conditions.

    ``volume_condition_ok`` reads the volume condition at this single scale as
    ``epsilon * log(1 / min_cell_volume) < 1``.  ``diameter_exponent`` is the
    largest exponent with ``diam(P_v) <= (max_e |e| vol(H_e)) ** alpha`` at all
    vertices (clamped to ``(0, 10]``) and ``diameter_constant`` the
    factor ``F`` needed for the clamped exponent.  ``K`` and
    ``small_component_diameter`` describe the set of cells with volume
    below ``epsilon ** K``.
    """

    epsilon: float
    mesh_gap: float
    min_cell_volume: float
    volume_condition_ok: bool
    diameter_exponent: float
    diameter_constant: float
    K: int
    small_component_diameter: float
    n_probes: int

    def to_dict(self):
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else v) for k, v in self.__dict__.items()}


def hypothesis_report(t, n_probes=10_000, K=None):
    """Compute the :class:`HypothesisReport` of a tiling."""
    d = t.dim
    eps = t.epsilon
    box = t.domain_box
    per = int(math.ceil(n_probes ** (1.0 / d)))
    while per**d < n_probes:
        per += 1
    axes = [np.linspace(a, b, per + 1)[:-1] + 0.5 * (b - a) / per for a, b in zip(box.lo, box.hi)]
    probes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    gap = float(t.kdtree.query(probes)[0].max())
    vols = t.cell_volumes
    vmin = float(vols.min())
    ii_ok = bool(eps * math.log(1.0 / vmin) < 1.0) if vmin < 1 else True

    e = t.edges
    prod = e.length * e.facet_area
    best = np.zeros(t.n)
    np.maximum.at(best, e.u, prod)
    np.maximum.at(best, e.v, prod)
    diam = t.cell_diameters
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.log(diam) / np.log(best)
    ratio = np.where((best > 0) & (best < 1) & (diam < 1) & np.isfinite(ratio), ratio, 10.0)
    alpha = float(np.clip(ratio.min(), 1e-12, 10.0))
    with np.errstate(divide="ignore"):
        F = float(np.max(np.where(best > 0, diam / best**alpha, 0.0)))

    if K is None:
        K = 2 * int(math.floor(math.log(1.0 / vmin) / math.log(1.0 / eps))) if eps < 1 and vmin < 1 else 0
    small = np.flatnonzero(vols < eps**K) if K > 0 else np.array([], dtype=np.int64)
    D = 0.0
    if len(small):
        mask = np.zeros(t.n, dtype=bool)
        mask[small] = True
        keep = mask[e.u] & mask[e.v]
        g = sp.coo_matrix((np.ones(keep.sum()), (e.u[keep], e.v[keep])), shape=(t.n, t.n))
        _, lab = csgraph.connected_components(g, directed=False)
        sums = np.bincount(lab[small], diam[small])
        D = float(sums.max())
    return HypothesisReport(eps, gap, vmin, ii_ok, alpha, F, int(K), D, len(probes))
