"""Approximate Gaussian multiplicative chaos, Poisson sampling and spread checks.

The log-correlated field is a sum of independent dyadic layers.  Layer ``k``
is white noise on the ``(2^k + 1)^d`` corner lattice of the ``2^k``-per-side
dyadic grid, multilinearly interpolated to the cell centres of the
``2^J``-per-side grid and renormalized pointwise to variance ``log 2``.  The
covariance of the sum at separation ``r`` is then roughly ``log(1/r)`` down to
scale ``2^{-K}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import fftconvolve
from scipy.spatial import cKDTree

from .errors import ConfigError, GammaOutOfRange, ResolutionTooCoarse
from .fvm import region_bounding_box
from .geometry import Box

__all__ = [
    "GmcField",
    "GmcMeasure",
    "PointCloud",
    "HolderReport",
    "CellBoundsReport",
    "SpreadReport",
    "sample_log_correlated_field",
    "gmc_mass",
    "uniform_measure",
    "sample_poisson_points",
    "read_point_cloud",
    "default_betas",
    "check_holder",
    "cell_radii",
    "check_cell_bounds",
    "separation_condition",
    "covering_condition",
]

LOG2 = math.log(2.0)


def _check_gamma(gamma, d):
    if not (0.0 <= gamma < math.sqrt(2 * d)):
        raise GammaOutOfRange(f"gamma={gamma} outside [0, sqrt(2d)) for d={d}")


@dataclass(frozen=True)
class GmcField:
    """Layered log-correlated field sampled at the centres of a ``2^J`` grid.

    Attributes
    ----------
    box : Box
    J : int
        Resolution exponent; ``values`` has shape ``(2^J,) * d``.
    K : int
        Number of dyadic layers.
    values : ndarray
    gamma : float
        Chaos parameter carried along to :func:`gmc_mass`.
    seed : int
    """

    box: Box
    J: int
    K: int
    values: np.ndarray
    gamma: float
    seed: int

    @property
    def dim(self):
        return self.box.dim

    @property
    def variance(self):
        """Pointwise variance of every node, exactly ``K log 2``."""
        return self.K * LOG2

    @property
    def cell_sides(self):
        return self.box.sides / 2 ** self.J

    def centers(self):
        return grid_centers(self.box, self.values.shape)


def grid_centers(box, shape):
    """Cell centres of a regular grid of the given shape over ``box``, C-order."""
    axes = [box.lo[a] + (np.arange(n) + 0.5) * (box.sides[a] / n)
            for a, n in enumerate(shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _interp_matrix(J, k):
    """Row-normalized linear interpolation from ``2^k + 1`` nodes to ``2^J`` centres."""
    n_fine, n_coarse = 2 ** J, 2 ** k
    s = (np.arange(n_fine) + 0.5) / n_fine * n_coarse
    i0 = np.minimum(np.floor(s).astype(int), n_coarse - 1)
    f = s - i0
    W = np.zeros((n_fine, n_coarse + 1))
    rows = np.arange(n_fine)
    W[rows, i0] = 1.0 - f
    W[rows, i0 + 1] = f
    # per-axis normalization; the tensor product of unit rows is a unit row
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    return W


def _apply_separable(xi, W):
    out = xi
    for axis in range(xi.ndim):
        out = np.moveaxis(np.tensordot(W, out, axes=([1], [axis])), 0, axis)
    return out


def sample_log_correlated_field(box, J, K, seed, gamma=1.0):
    """Sum of ``K`` independent dyadic layers on the ``2^J`` centre grid.

    Parameters
    ----------
    box : Box
    J : int
        At least 3.
    K : int
        Between 1 and ``J``.
    seed : int
        Each layer draws from its own child of ``SeedSequence(seed)``.
    gamma : float, optional
        Stored on the field, validated against ``[0, sqrt(2d))``.

    Raises
    ------
    ResolutionTooCoarse
        If ``K > J``.
    """
    if J < 3:
        raise ConfigError("J must be at least 3")
    if K < 1:
        raise ConfigError("K must be at least 1")
    if K > J:
        raise ResolutionTooCoarse(f"K={K} layers need J >= K, got J={J}")
    d = box.dim
    _check_gamma(gamma, d)
    children = np.random.SeedSequence(int(seed)).spawn(K)
    values = np.zeros((2 ** J,) * d)
    for k, ss in zip(range(1, K + 1), children):
        rng = np.random.Generator(np.random.PCG64(ss))
        xi = rng.standard_normal((2 ** k + 1,) * d)
        values += math.sqrt(LOG2) * _apply_separable(xi, _interp_matrix(J, k))
    return GmcField(box, J, K, values, float(gamma), int(seed))


@dataclass(frozen=True)
class GmcMeasure:
    """Piecewise constant measure on a regular grid over ``box``.

    ``cell_mass`` may have any grid shape; cell ``c`` covers the box slab
    ``lo + [c, c+1) * sides / shape``.
    """

    box: Box
    cell_mass: np.ndarray
    gamma: float = 0.0

    def __post_init__(self):
        if self.cell_mass.ndim != self.box.dim:
            raise ConfigError("cell_mass must have one axis per box dimension")
        if np.any(self.cell_mass < 0) or not np.all(np.isfinite(self.cell_mass)):
            raise ConfigError("cell masses must be finite and nonnegative")

    @property
    def dim(self):
        return self.box.dim

    @property
    def total_mass(self):
        return float(self.cell_mass.sum())

    @property
    def cell_sides(self):
        return self.box.sides / np.array(self.cell_mass.shape)

    @property
    def cell_volume(self):
        return float(np.prod(self.cell_sides))

    def centers(self):
        return grid_centers(self.box, self.cell_mass.shape)


def uniform_measure(box, shape):
    """Lebesgue measure discretized on a grid of the given shape."""
    shape = tuple(int(s) for s in np.broadcast_to(shape, (box.dim,)))
    vol = box.volume / np.prod(shape)
    return GmcMeasure(box, np.full(shape, vol), 0.0)


def gmc_mass(field: GmcField, gamma=None):
    """Cell masses ``exp(gamma Phi - gamma^2 Var / 2) * cell volume``.

    The normalization makes the expected mass of every cell its Lebesgue
    volume.  ``gamma`` defaults to the field's own.

    Raises
    ------
    GammaOutOfRange
    """
    g = field.gamma if gamma is None else float(gamma)
    _check_gamma(g, field.dim)
    vol = field.box.volume / field.values.size
    if g == 0.0:
        mass = np.full(field.values.shape, vol)
    else:
        mass = np.exp(g * field.values - 0.5 * g * g * field.variance) * vol
    return GmcMeasure(field.box, mass, g)


@dataclass(frozen=True)
class PointCloud:
    """Poisson sample of intensity ``m * mu`` inside ``box``."""

    points: np.ndarray
    m: float
    seed: int
    box: Box

    def __len__(self):
        return len(self.points)

    @property
    def dim(self):
        return self.box.dim

    def to_csv(self):
        lines = [f"# d={self.dim} m={self.m!r} seed={self.seed}"]
        lines += [",".join(repr(float(c)) for c in p) for p in self.points]
        return "\n".join(lines) + "\n"


def read_point_cloud(text, box=None) -> PointCloud:
    """Parse the CSV written by :meth:`PointCloud.to_csv`."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ConfigError("point cloud CSV must start with a '# d=.. m=.. seed=..' header")
    head = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    try:
        d, m, seed = int(head["d"]), float(head["m"]), int(head["seed"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad point cloud header {lines[0]!r}") from exc
    rows = [ln for ln in lines[1:] if ln.strip()]
    pts = np.array([[float(c) for c in ln.split(",")] for ln in rows]).reshape(-1, d)
    return PointCloud(pts, m, seed, box if box is not None else Box.unit(d))


def sample_poisson_points(mu: GmcMeasure, m, seed) -> PointCloud:
    """Poisson process of intensity ``m * mu``.

    Each grid cell gets a ``Poisson(m * cell_mass)`` count of points placed
    uniformly in the cell.  Output is a pure function of ``(mu, m, seed)``.
    """
    if not m > 0:
        raise ConfigError("m must be positive")
    rng = np.random.default_rng(int(seed))
    flat = mu.cell_mass.ravel()
    counts = rng.poisson(m * flat)
    cell = np.repeat(np.arange(flat.size), counts)
    corner = np.stack(np.unravel_index(cell, mu.cell_mass.shape), axis=1).astype(float)
    offset = rng.random((len(cell), mu.dim))
    pts = mu.box.lo_arr + (corner + offset) * mu.cell_sides
    # guard against rounding onto the upper face
    pts = np.minimum(pts, np.nextafter(mu.box.hi_arr, -np.inf))
    return PointCloud(pts, float(m), int(seed), mu.box)


def default_betas(d, gamma):
    """Default Hölder exponents ``(beta_plus, beta_minus)`` for chaos parameter gamma.

    ``beta+ = (sqrt(d) + gamma/sqrt(2))^2`` and
    ``beta- = max(0.1, (sqrt(d) - gamma/sqrt(2))^2)``.  These are calibrated
    defaults, not sharp exponents.
    """
    s, g = math.sqrt(d), gamma / math.sqrt(2)
    return (s + g) ** 2, max(0.1, (s - g) ** 2)


@dataclass
class HolderReport:
    """Outcome of :func:`check_holder`.

    ``lower_violations[i]`` counts probes with ``mu(B_r) < r^{beta+}`` at
    ``radii[i]`` and ``upper_violations[i]`` those with ``mu(B_r) > r^{beta-}``.
    """

    radii: np.ndarray
    beta_plus: float
    beta_minus: float
    n_probes: int
    lower_violations: np.ndarray
    upper_violations: np.ndarray
    min_ratio_lower: np.ndarray
    max_ratio_upper: np.ndarray

    @property
    def violation_fraction(self):
        bad = self.lower_violations + self.upper_violations
        return float(bad.sum() / (self.n_probes * len(self.radii)))

    def to_dict(self):
        return {
            "radii": [float(r) for r in self.radii],
            "beta_plus": self.beta_plus,
            "beta_minus": self.beta_minus,
            "n_probes": self.n_probes,
            "lower_violations": [int(x) for x in self.lower_violations],
            "upper_violations": [int(x) for x in self.upper_violations],
            "violation_fraction": self.violation_fraction,
        }


def _ball_kernel(sides, r):
    half = np.floor(r / sides).astype(int)
    axes = [np.arange(-h, h + 1) * s for h, s in zip(half, sides)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return (sum(m * m for m in mesh) <= r * r * (1 + 1e-12)).astype(float)


def check_holder(mu: GmcMeasure, beta_plus, beta_minus, radii, region=None,
                 probes_per_side=32) -> HolderReport:
    """Test ``r^{beta+} <= mu(B_r(z)) <= r^{beta-}`` on a probe sub-grid.

    The ball mass is the total mass of grid cells whose centres lie within
    ``r`` of ``z``, computed for all centres at once by FFT convolution.
    Probes are cell centres on a strided sub-grid inside ``region`` (default:
    the box shrunk by the largest radius, so every ball stays in the box).

    Raises
    ------
    ConfigError
        If not ``0 < beta_minus < beta_plus``.
    """
    if not (0 < beta_minus < beta_plus):
        raise ConfigError("need 0 < beta_minus < beta_plus")
    radii = np.asarray(sorted(radii, reverse=True), dtype=float)
    sides = mu.cell_sides
    if np.any(radii < sides.max()):
        raise ConfigError("radii must be at least one grid cell")
    centers = mu.centers()
    if region is None:
        rmax = radii.max()
        region = Box(tuple(mu.box.lo_arr + rmax), tuple(mu.box.hi_arr - rmax))
    stride = [max(1, n // probes_per_side) for n in mu.cell_mass.shape]
    idx = np.stack(np.unravel_index(np.arange(mu.cell_mass.size), mu.cell_mass.shape), axis=1)
    on_grid = np.all((idx - np.array(stride) // 2) % np.array(stride) == 0, axis=1)
    inside = on_grid & region.contains(centers)
    if not inside.any():
        raise ConfigError("no probe centre inside the region")
    lower, upper, lo_ratio, up_ratio = [], [], [], []
    for r in radii:
        ball = fftconvolve(mu.cell_mass, _ball_kernel(sides, r), mode="same").ravel()[inside]
        ball = np.maximum(ball, 0.0)
        lower.append(int(np.sum(ball < r ** beta_plus)))
        upper.append(int(np.sum(ball > r ** beta_minus)))
        lo_ratio.append(float(ball.min() / r ** beta_plus))
        up_ratio.append(float(ball.max() / r ** beta_minus))
    return HolderReport(radii, float(beta_plus), float(beta_minus), int(inside.sum()),
                        np.array(lower), np.array(upper), np.array(lo_ratio), np.array(up_ratio))


def cell_radii(t, idx=None):
    """Inradius and circumradius of each cell about its own site.

    The inradius is the smallest distance from the site to a facet plane
    (box facets included), the circumradius the largest distance to a cell
    vertex.
    """
    idx = np.arange(len(t.cells)) if idx is None else np.asarray(idx, dtype=int)
    rin = np.empty(len(idx))
    rout = np.empty(len(idx))
    for k, i in enumerate(idx):
        s = t.sites[i]
        c = t.cells[i]
        rin[k] = min(float(f.normal @ (f.points[0] - s)) for f in c.facets)
        rout[k] = float(np.sqrt(((c.vertices - s) ** 2).sum(axis=1).max()))
    return rin, rout


@dataclass
class CellBoundsReport:
    """Per-cell comparison with ``m^{-8/beta-} <= r_in`` and ``r_out <= m^{-1/(3 beta+)}``."""

    m: float
    lower_bound: float
    upper_bound: float
    sites: np.ndarray
    inradius: np.ndarray
    circumradius: np.ndarray
    inradius_violations: np.ndarray
    circumradius_violations: np.ndarray

    @property
    def passed(self):
        return len(self.inradius_violations) == 0 and len(self.circumradius_violations) == 0

    def to_dict(self):
        return {
            "m": self.m,
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "n_cells": int(len(self.sites)),
            "min_inradius": float(self.inradius.min()),
            "max_circumradius": float(self.circumradius.max()),
            "inradius_violations": [int(i) for i in self.inradius_violations],
            "circumradius_violations": [int(i) for i in self.circumradius_violations],
        }


def check_cell_bounds(t, m, beta_plus, beta_minus, region=None) -> CellBoundsReport:
    """Compare every cell's in- and circumradius with the power-of-``m`` bounds.

    Cells are those whose site lies in ``region`` (default: all cells).
    Violating site indices are reported; nothing is raised.
    """
    if region is None:
        sel = np.arange(len(t.cells))
    else:
        sel = np.flatnonzero(region.contains(t.sites))
    rin, rout = cell_radii(t, sel)
    lo = float(m) ** (-8.0 / beta_minus)
    hi = float(m) ** (-1.0 / (3.0 * beta_plus))
    return CellBoundsReport(float(m), lo, hi, sel, rin, rout,
                            sel[rin < lo], sel[rout > hi])


@dataclass
class SpreadReport:
    """Verdict of a lattice spread condition at one scale."""

    scale: float
    holds: bool
    n_lattice: int
    witness: Optional[np.ndarray] = field(default=None)


def separation_condition(points, U, r) -> SpreadReport:
    """No cube ``x + [-2r, 2r]^d`` with ``x`` in ``rZ^d`` near ``U`` holds two points.

    The lattice runs over the bounding box of ``U`` enlarged by ``2r``, which
    covers every cube that can contain a point within ``2r`` of ``U``.  When
    the condition holds, every two points at least one of which lies in ``U``
    are more than ``2r`` apart in the sup norm, so every cell with site in
    ``U`` contains ``B_r(site)``.

    Two points share a cube iff on every axis the interval
    ``[max - 2r, min + 2r]`` contains a lattice coordinate, so only pairs at
    sup distance at most ``4r`` need checking.
    """
    points = np.asarray(points, dtype=float)
    bb = region_bounding_box(U)
    lo = bb.lo_arr - 2 * r
    hi = bb.hi_arr + 2 * r
    n_lat = int(np.prod(np.floor(hi / r) - np.ceil(lo / r) + 1))
    pairs = cKDTree(points).query_pairs(4 * r * (1 + 1e-12), p=np.inf, output_type="ndarray")
    if len(pairs) == 0:
        return SpreadReport(r, True, n_lat)
    a, b = points[pairs[:, 0]], points[pairs[:, 1]]
    left = np.maximum(np.maximum(a, b) - 2 * r, lo)
    right = np.minimum(np.minimum(a, b) + 2 * r, hi)
    share = np.all(np.ceil(left / r) <= np.floor(right / r), axis=1)
    if share.any():
        return SpreadReport(r, False, n_lat, pairs[np.flatnonzero(share)[0]])
    return SpreadReport(r, True, n_lat)


def covering_condition(points, U, k, delta=0.1, max_lattice=2_000_000) -> SpreadReport:
    """Every cube ``y + [-delta k, delta k]^d`` with ``y`` in ``kZ^d`` near ``U`` holds a point.

    ``y`` ranges over the lattice points of the bounding box of ``U`` enlarged
    by ``2k``.  When the condition holds the cells with site in ``U`` lie in
    ``B_{4 k sqrt(d)}(site)``.  ``delta`` is a small dimensional constant
    whose exact value the geometric argument leaves open.
    """
    points = np.asarray(points, dtype=float)
    bb = region_bounding_box(U)
    lo_i = np.ceil((bb.lo_arr - 2 * k) / k).astype(int)
    hi_i = np.floor((bb.hi_arr + 2 * k) / k).astype(int)
    counts = hi_i - lo_i + 1
    n_lat = int(np.prod(counts))
    if n_lat > max_lattice:
        raise ConfigError(f"covering lattice of {n_lat} points exceeds {max_lattice}")
    axes = [np.arange(a, b + 1) * k for a, b in zip(lo_i, hi_i)]
    mesh = np.meshgrid(*axes, indexing="ij")
    Y = np.stack([m_.ravel() for m_ in mesh], axis=1)
    n_in = cKDTree(points).query_ball_point(Y, delta * k, p=np.inf, return_length=True)
    empty = np.flatnonzero(n_in == 0)
    if len(empty):
        return SpreadReport(k, False, n_lat, Y[empty[0]])
    return SpreadReport(k, True, n_lat)
