"""Structural identities every orthogonal tiling must satisfy.

:func:`run_invariants` recomputes each identity from the raw geometry (sites,
cell vertex loops, edge table) and returns one :class:`InvariantResult` per
check, so a corrupted file names the identity it breaks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csgraph

from .fvm import conductance_gradient, directed_divergence_pairing, divergence, laplacian_apply, subdomain
from .geometry import Box, cone_volume, facet_area
from .harmonic import _pcg
from .tilings import CombinatorialGraph, validate_orthogonality

__all__ = ["InvariantResult", "run_invariants", "IDENTITY_RTOL"]

IDENTITY_RTOL = 1e-9


@dataclass
class InvariantResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""

    def to_dict(self):
        return {"invariant": self.name, "passed": bool(self.passed),
                "worst": float(self.worst), "detail": self.detail}


def _rel(a, b):
    return np.abs(a - b) / np.maximum(np.abs(b), 1e-300)


def _worst(name, err, tol, labels):
    k = int(np.argmax(err)) if len(err) else 0
    worst = float(err[k]) if len(err) else 0.0
    ok = worst <= tol
    return InvariantResult(name, ok, worst, "" if ok else f"worst at {labels(k)}")


def _inner_box(box, margin=0.1):
    pad = margin * box.sides
    return Box(tuple(box.lo_arr + pad), tuple(box.hi_arr - pad))


def _graph_invariants(g):
    e = g.edges
    res = []
    bad = np.flatnonzero((e.u >= e.v) | (e.conductance <= 0))
    dup = len(set(zip(e.u.tolist(), e.v.tolist()))) != len(e)
    res.append(InvariantResult("edge_table", len(bad) == 0 and not dup, float(len(bad)),
                               "" if len(bad) == 0 and not dup else "unsorted, duplicate or nonpositive edges"))
    ncomp, _ = csgraph.connected_components(g.conductance_matrix, directed=False)
    res.append(InvariantResult("connected", ncomp == 1, float(ncomp), "" if ncomp == 1 else f"{ncomp} components"))
    return res


def run_invariants(t, seed=0, n_pairs=10):
    """Run every structural identity on a tiling (or the edge checks on a graph)."""
    if isinstance(t, CombinatorialGraph):
        return _graph_invariants(t)
    e = t.edges
    d = t.dim
    S = t.sites
    diam = t.domain_box.diameter
    def edge_label(k):
        return f"edge ({int(e.u[k])},{int(e.v[k])})"

    out = []
    out.append(_worst("edge_length", _rel(e.length, np.linalg.norm(S[e.u] - S[e.v], axis=1)),
                      IDENTITY_RTOL, edge_label))
    out.append(_worst("conductance_definition", _rel(e.conductance, e.facet_area / e.length),
                      IDENTITY_RTOL, edge_label))

    areas = np.empty(len(e))
    cones = np.empty(len(e))
    for k in range(len(e)):
        u, v = int(e.u[k]), int(e.v[k])
        fu, fv = t.facet(u, v), t.facet(v, u)
        if fu is None or fv is None:
            areas[k] = cones[k] = np.nan
            continue
        areas[k] = 0.5 * (facet_area(fu) + facet_area(fv))
        cones[k] = cone_volume(S[u], fu.points) + cone_volume(S[v], fv.points)
    missing = np.flatnonzero(np.isnan(areas))
    out.append(InvariantResult("facet_pairing", len(missing) == 0, float(len(missing)),
                               "" if len(missing) == 0 else f"no shared facet for {edge_label(missing[0])}"))
    ok = ~np.isnan(areas)
    idx = np.flatnonzero(ok)
    def sub_label(k):
        return edge_label(idx[k])

    out.append(_worst("facet_area", _rel(e.facet_area[ok], areas[ok]), IDENTITY_RTOL, sub_label))
    err = np.maximum(_rel(d * e.qe_volume[ok], e.length[ok] * e.facet_area[ok]),
                     _rel(e.qe_volume[ok], cones[ok]))
    out.append(_worst("edge_dual_volume_identity", err, IDENTITY_RTOL, sub_label))

    cover = np.array([_rel(sum(cone_volume(S[i], f.points) for f in c.facets), c.volume)
                      for i, c in enumerate(t.cells)])
    out.append(_worst("dual_cover", cover, IDENTITY_RTOL, lambda k: f"cell {k}"))

    rep = validate_orthogonality(t)
    out.append(InvariantResult(
        "orthogonality", rep.passed, max(rep.max_angle, rep.site_defect),
        "" if rep.passed else f"max angle {rep.max_angle:.3e} at edge {rep.worst_edge}, "
                              f"site defect {rep.site_defect:.3e} at site {rep.worst_site}"))

    rng = np.random.default_rng(seed)
    free = np.flatnonzero(~t.touches_box)
    a = t.total_conductance
    worst_lin = 0.0
    for _ in range(n_pairs):
        p = rng.standard_normal(d)
        lap = np.abs(laplacian_apply(t, S @ p + rng.standard_normal()))[free]
        if len(free):
            worst_lin = max(worst_lin, float((lap / (np.linalg.norm(p) * a[free] * diam)).max()))
    out.append(InvariantResult("linear_kernel", worst_lin <= 1e-8, worst_lin,
                               "" if worst_lin <= 1e-8 else "linear function not discrete harmonic"))

    try:
        sub = subdomain(t, _inner_box(t.domain_box))
    except Exception as exc:  # tiny tilings may have no interior
        out.append(InvariantResult("divergence_theorem", True, 0.0, f"skipped: {exc}"))
        return out
    worst_div = 0.0
    for _ in range(n_pairs):
        theta = rng.standard_normal(len(e))
        f = np.zeros(t.n)
        f[sub.interior] = rng.standard_normal(len(sub.interior))
        lhs, rhs = directed_divergence_pairing(t, sub, theta, f)
        worst_div = max(worst_div, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    out.append(InvariantResult("divergence_theorem", worst_div <= 1e-10, worst_div,
                               "" if worst_div <= 1e-10 else "summation by parts fails"))
    out.append(_dual_variational(t, sub, rng))
    return out


def _dual_variational(t, sub, rng):
    """Energy of ``a grad f`` against a flow with the same divergence on the interior."""
    e = t.edges
    A = sub.interior
    f = np.zeros(t.n)
    f[A] = rng.standard_normal(len(A))
    # divergence-free perturbation: random closure flow minus its potential part
    xi = np.zeros(len(e))
    xi[sub.closure_edges] = rng.standard_normal(len(sub.closure_edges))
    b = divergence(t, xi)[A]
    L = t.laplacian_matrix[A][:, A]
    u = np.zeros(t.n)
    u[A] = _pcg(L, -b, L.diagonal(), 1e-12, None)[0]
    theta = conductance_gradient(t, f).values + xi - conductance_gradient(t, u).values
    k = sub.closure_edges
    cond = e.conductance[k]
    ga = conductance_gradient(t, f).values[k]
    div_err = float(np.abs(divergence(t, theta)[A] - divergence(t, conductance_gradient(t, f))[A]).max())
    lhs = float(np.sum(ga**2 / cond))
    rhs = float(np.sum(theta[k] ** 2 / cond))
    ok = lhs <= rhs * (1 + 1e-12) + 1e-12 and div_err <= 1e-6 * max(1.0, float(np.abs(b).max()))
    return InvariantResult("dual_variational", ok, lhs - rhs,
                           "" if ok else f"energy {lhs:.6e} exceeds flow energy {rhs:.6e}")
