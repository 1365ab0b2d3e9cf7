import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthowalk.errors import DegenerateInput, InvalidPeriod, NonDivisibleSpacing
from orthowalk.geometry import Box
from orthowalk.tilings import (
    build_counterexample_graph,
    build_grid_tiling,
    build_voronoi_tiling,
    hypothesis_report,
    nearest_vertex,
    validate_orthogonality,
)
from helpers import poisson_voronoi, random_points


def test_grid_2d_half():
    t = build_grid_tiling(Box.unit(2), 0.5)
    assert t.n == 4 and len(t.edges) == 4
    np.testing.assert_array_equal(t.edges.conductance, 1.0)


def test_grid_3d_half():
    t = build_grid_tiling(Box.unit(3), 0.5)
    assert t.n == 8 and len(t.edges) == 12
    np.testing.assert_allclose(t.edges.conductance, 0.5, rtol=1e-15)


@pytest.mark.parametrize("d,h", [(2, 0.25), (2, 1 / 16), (3, 0.25)])
def test_grid_orthogonality_exact(d, h):
    rep = validate_orthogonality(build_grid_tiling(Box.unit(d), h))
    assert rep.max_angle == 0.0 and rep.passed


def test_grid_nondivisible():
    with pytest.raises(NonDivisibleSpacing):
        build_grid_tiling(Box.unit(2), 0.3)


def test_voronoi_of_grid_sites():
    pts = np.array([[i + 0.5, j + 0.5] for i in range(3) for j in range(3)])
    t = build_voronoi_tiling(pts, Box((0, 0), (3, 3)))
    c = t.cells[4]
    assert c.volume == pytest.approx(1.0, rel=1e-14)
    for j in t.neighbors(4):
        assert t.edges[t.edges.find(4, int(j))].conductance == pytest.approx(1.0, rel=1e-14)
    assert len(t.neighbors(4)) == 4


def test_four_sites_tile_box():
    pts = np.array([[0.0, 0], [1, 0], [0, 1], [1, 1]])
    t = build_voronoi_tiling(pts, Box((-1, -1), (2, 2)))
    assert t.cell_volumes.sum() == pytest.approx(9.0, rel=1e-14)
    f = t.facet(0, 1)
    np.testing.assert_allclose(f.points[:, 0], 0.5, atol=1e-15)


def _delaunay_oracle(P):
    """Edges of all triangles with an empty circumcircle, by exhaustive search."""
    n = len(P)
    tri = np.array(list(itertools.combinations(range(n), 3)))
    a, b, c = P[tri[:, 0]], P[tri[:, 1]], P[tri[:, 2]]
    D = 2 * (a[:, 0] * (b[:, 1] - c[:, 1]) + b[:, 0] * (c[:, 1] - a[:, 1]) + c[:, 0] * (a[:, 1] - b[:, 1]))
    ok = np.abs(D) > 1e-14
    tri, a, b, c, D = tri[ok], a[ok], b[ok], c[ok], D[ok]
    na, nb, nc = (a**2).sum(1), (b**2).sum(1), (c**2).sum(1)
    ux = (na * (b[:, 1] - c[:, 1]) + nb * (c[:, 1] - a[:, 1]) + nc * (a[:, 1] - b[:, 1])) / D
    uy = (na * (c[:, 0] - b[:, 0]) + nb * (a[:, 0] - c[:, 0]) + nc * (b[:, 0] - a[:, 0])) / D
    cen = np.stack([ux, uy], 1)
    r2 = ((a - cen) ** 2).sum(1)
    empty = np.ones(len(tri), dtype=bool)
    for s in range(0, len(tri), 20000):
        sl = slice(s, s + 20000)
        d2 = ((cen[sl, None, :] - P[None, :, :]) ** 2).sum(-1)
        d2[np.arange(d2.shape[0])[:, None], tri[sl]] = np.inf
        empty[sl] = (d2 > r2[sl, None] * (1 + 1e-10)).all(1)
    edges = set()
    for t_ in tri[empty]:
        for i, j in ((0, 1), (0, 2), (1, 2)):
            edges.add((int(min(t_[i], t_[j])), int(max(t_[i], t_[j]))))
    return edges, cen[empty]


def test_voronoi_edges_equal_delaunay_oracle():
    P = random_points(200, 2, 123)
    oracle, centres = _delaunay_oracle(P)
    # a box holding every Voronoi vertex makes clipped adjacency the full Delaunay graph
    lo = np.minimum(centres.min(0), 0) - 1
    hi = np.maximum(centres.max(0), 1) + 1
    t = build_voronoi_tiling(P, Box(tuple(lo), tuple(hi)))
    got = set(zip(t.edges.u.tolist(), t.edges.v.tolist()))
    assert got == oracle


@pytest.mark.parametrize(
    "pts",
    [
        np.array([[0.1, 0.1], [0.2, 0.2]]),
        np.array([[0.1, 0.1], [0.2, 0.2], [0.3, 0.3]]),
        np.array([[0.1, 0.1], [0.1, 0.1], [0.3, 0.7]]),
        np.array([[0.1, 0.1], [1.2, 0.2], [0.3, 0.7]]),
    ],
)
def test_voronoi_degenerate_input(pts):
    with pytest.raises(DegenerateInput):
        build_voronoi_tiling(pts, Box.unit(2))


def test_voronoi_orthogonality_and_negative_control():
    t = build_voronoi_tiling(random_points(300, 2, 1), Box.unit(2))
    assert validate_orthogonality(t).passed
    t.sites[17] += np.array([0.004, -0.003])
    assert not validate_orthogonality(t).passed


def test_voronoi_3d_orthogonality():
    t = build_voronoi_tiling(random_points(200, 3, 2), Box.unit(3))
    assert validate_orthogonality(t).passed


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.sampled_from([2, 3]))
def test_edge_records_and_bisector(seed, d):
    P = random_points(60, d, seed)
    t = build_voronoi_tiling(P, Box.unit(d))
    e = t.edges
    np.testing.assert_allclose(e.conductance * e.length, e.facet_area, rtol=1e-12)
    np.testing.assert_allclose(e.qe_volume, e.length * e.facet_area / d, rtol=1e-12)
    assert np.all(e.u < e.v) and np.all(e.conductance > 0)
    for k in range(len(e)):
        x = t.facet(int(e.u[k]), int(e.v[k])).centroid
        du = np.linalg.norm(P[e.u[k]] - x)
        dv = np.linalg.norm(P[e.v[k]] - x)
        assert du == pytest.approx(dv, rel=1e-8)
    assert t.cell_volumes.sum() == pytest.approx(1.0, rel=1e-8)


def test_voronoi_deterministic():
    P = random_points(150, 3, 9)
    a = build_voronoi_tiling(P, Box.unit(3))
    b = build_voronoi_tiling(P.copy(), Box.unit(3))
    for name in ("u", "v", "length", "facet_area", "conductance", "qe_volume"):
        assert np.array_equal(getattr(a.edges, name), getattr(b.edges, name))
    assert all(np.array_equal(x.vertices, y.vertices) for x, y in zip(a.cells, b.cells))


# ---------------------------------------------------------------------------
# counterexample graph


def _groups(g):
    kind = np.asarray(g.meta["kind"])
    layer = np.asarray(g.meta["layer"])
    return kind, layer


def test_counterexample_degrees_d3():
    g = build_counterexample_graph(3, 2, 4)
    kind, layer = _groups(g)
    assert set(g.degree[(kind == 0) & (layer == 0)]) == {9}
    assert set(g.degree[(kind == 1) & (layer == 0)]) == {6}
    assert g.degree.max() <= 2 * 3 + 3


def test_middle_contact_distance():
    assert math.sqrt(7 / 4 + 1 / 4 + 1 / 4) == 1.5
    g = build_counterexample_graph(3, 2, 4)
    kind, layer = _groups(g)
    e = g.edges
    cross = kind[e.u] != kind[e.v]
    assert cross.sum() == 4 * np.sum((kind == 0) & (layer == 0))
    np.testing.assert_allclose(e.length[cross], 1.5, rtol=1e-12)


def test_counterexample_big_nonmiddle_degree_d4():
    g = build_counterexample_graph(4, 2, 4)
    kind, layer = _groups(g)
    inner = (kind == 0) & (layer < 0) & (layer > -4)
    assert set(g.degree[inner]) == {8}


@pytest.mark.parametrize("d", [3, 4, 5])
@pytest.mark.parametrize("N", [2, 3])
@pytest.mark.parametrize("T", [4, 6])
def test_counterexample_layer_degrees(d, N, T):
    g = build_counterexample_graph(d, N, T)
    kind, layer = _groups(g)
    deg = g.degree
    assert deg.max() <= 2 * d + 3
    big_mid = (kind == 0) & (layer == 0)
    assert set(deg[big_mid]) == {2 * d + 3}
    assert set(deg[(kind == 0) & (layer < 0) & (layer > -2 * N)]) == {2 * d}
    assert set(deg[(kind == 1) & (layer > 0) & (layer < 2 * N)]) == {2 * d}
    small_mid = (kind == 1) & (layer == 0)
    if d == 3:
        assert set(deg[small_mid]) == {6}
    else:
        # with small spheres on Z^d and big ones on 2Z^d only small middle spheres
        # with even coordinates 4..d touch a big sphere
        touching = np.mean(deg[small_mid] == 2 * d)
        assert set(deg[small_mid]) == {2 * d - 1, 2 * d}
        assert touching == pytest.approx(2.0 ** (3 - d), rel=1e-12)
    A = np.asarray(g.meta["A"])
    B = np.asarray(g.meta["B"])
    assert set(layer[A]) == {-2 * N} and set(kind[A]) == {0}
    assert set(layer[B]) == {2 * N} and set(kind[B]) == {1}
    # symmetric adjacency without self-loops
    C = g.conductance_matrix
    assert (C != C.T).nnz == 0 and C.diagonal().max() == 0


@pytest.mark.parametrize("T", [2, 2.5])
def test_counterexample_invalid_period(T):
    with pytest.raises(InvalidPeriod):
        build_counterexample_graph(3, 2, T)


# ---------------------------------------------------------------------------
# nearest vertex and hypothesis report


def test_nearest_vertex_grid_cell():
    t = build_grid_tiling(Box((0, 0), (3, 3)), 1.0)
    v = nearest_vertex(t, [0.4, 0.4])
    np.testing.assert_array_equal(t.sites[v], [0.5, 0.5])


def test_nearest_vertex_tie_is_lexicographic():
    pts = np.array([[1.0, 0.0], [0.0, 0.0], [0.5, 1.0]])
    t = build_voronoi_tiling(pts, Box((-1, -1), (2, 2)))
    assert nearest_vertex(t, [0.5, -0.5]) == 1


def test_nearest_vertex_matches_linear_scan():
    t = poisson_voronoi(2, 1024, 4)
    rng = np.random.default_rng(0)
    for z in rng.random((200, 2)):
        assert nearest_vertex(t, z) == int(np.argmin(((t.sites - z) ** 2).sum(1)))


@pytest.mark.parametrize("d,h", [(2, 0.125), (3, 0.25)])
def test_hypothesis_report_grid(d, h):
    rep = hypothesis_report(build_grid_tiling(Box.unit(d), h))
    assert rep.epsilon == pytest.approx(h * math.sqrt(d), rel=1e-14)
    assert rep.min_cell_volume == pytest.approx(h**d, rel=1e-12)
    probe_res = math.sqrt(d) / math.ceil(rep.n_probes ** (1 / d))
    assert rep.mesh_gap <= h * math.sqrt(d) / 2 + probe_res
    assert rep.n_probes >= 10_000
    assert all(math.isfinite(v) for v in rep.to_dict().values())


def test_hypothesis_report_poisson_voronoi():
    t = poisson_voronoi(2, 4096, 0)
    rep = hypothesis_report(t)
    assert rep.K >= 1
    assert rep.min_cell_volume >= rep.epsilon**rep.K
    assert rep.to_dict() == hypothesis_report(t).to_dict()
