import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from orthowalk.errors import ConfigError, GammaOutOfRange, ResolutionTooCoarse
from orthowalk.gmc import (
    LOG2,
    GmcMeasure,
    _interp_matrix,
    cell_radii,
    check_cell_bounds,
    check_holder,
    covering_condition,
    default_betas,
    gmc_mass,
    read_point_cloud,
    sample_log_correlated_field,
    sample_poisson_points,
    separation_condition,
    uniform_measure,
)
from orthowalk.geometry import Box
from orthowalk.tilings import build_grid_tiling, build_voronoi_tiling
from helpers import gmc_field, poisson_voronoi

UNIT2 = Box.unit(2)


def test_field_shape_and_determinism():
    a = sample_log_correlated_field(UNIT2, 5, 3, seed=42)
    b = sample_log_correlated_field(UNIT2, 5, 3, seed=42)
    c = sample_log_correlated_field(UNIT2, 5, 3, seed=43)
    assert a.values.shape == (32, 32)
    assert a.values.tobytes() == b.values.tobytes()
    assert not np.array_equal(a.values, c.values)
    assert np.all(np.isfinite(a.values))
    assert a.variance == pytest.approx(3 * LOG2)


def test_field_errors():
    with pytest.raises(ResolutionTooCoarse):
        sample_log_correlated_field(UNIT2, 4, 5, 0)
    with pytest.raises(ConfigError):
        sample_log_correlated_field(UNIT2, 2, 1, 0)
    with pytest.raises(ConfigError):
        sample_log_correlated_field(UNIT2, 5, 0, 0)
    with pytest.raises(GammaOutOfRange):
        sample_log_correlated_field(UNIT2, 5, 2, 0, gamma=2.0)


def test_interpolation_rows_have_unit_norm():
    for J, k in [(3, 1), (8, 6), (9, 9)]:
        W = _interp_matrix(J, k)
        np.testing.assert_allclose(np.linalg.norm(W, axis=1), 1.0, rtol=1e-14)
        assert np.all(W >= 0)


def test_single_layer_covariance():
    J = 6
    W = _interp_matrix(J, 1)
    n = 400
    vals = np.array([sample_log_correlated_field(UNIT2, J, 1, s).values[[3, 4], [3, 4]] for s in range(n)])
    exact = LOG2 * float(W[3] @ W[4]) ** 2
    assert exact >= 0.99 * LOG2
    emp = np.mean(vals[:, 0] * vals[:, 1])
    se = np.std(vals[:, 0] * vals[:, 1]) / math.sqrt(n)
    assert abs(emp - exact) <= 4 * se


def test_field_variance_within_quarter():
    v = np.mean([gmc_field(2, 8, 6, s, 1.0).values.var() for s in range(20)])
    assert abs(v / (6 * LOG2) - 1) <= 0.25


def test_covariance_decays_logarithmically():
    J, K = 9, 7
    n = 2**J
    lags = [2**j for j in range(2, 7)]
    cov = np.zeros(len(lags))
    seeds = range(12)
    for s in seeds:
        f = sample_log_correlated_field(UNIT2, J, K, s).values
        f = f - f.mean()
        for i, lag in enumerate(lags):
            cov[i] += np.mean(f[:-lag] * f[lag:]) / len(seeds)
    slope = np.polyfit(np.log(np.array(lags) / n), cov, 1)[0]
    assert -1.2 <= slope <= -0.8


def test_gmc_mass_examples():
    f = gmc_field(2, 8, 6, 0, 1.0)
    flat = gmc_mass(f, 0.0)
    np.testing.assert_array_equal(flat.cell_mass, np.full((256, 256), 1 / 256**2))
    mu = gmc_mass(f)
    assert np.all(mu.cell_mass >= 0)
    assert mu.total_mass == pytest.approx(mu.cell_mass.sum(), rel=1e-10)
    ratios = [np.ptp(np.log(gmc_mass(f, g).cell_mass)) for g in (0.5, 1.0, 1.5)]
    assert ratios[0] < ratios[1] < ratios[2]
    for bad in (-0.1, 2.0, 3.0):
        with pytest.raises(GammaOutOfRange):
            gmc_mass(f, bad)


def test_gmc_expected_total_mass():
    totals = np.array([gmc_mass(gmc_field(2, 8, 6, s, 1.0)).total_mass for s in range(50)])
    se = totals.std(ddof=1) / math.sqrt(len(totals))
    assert abs(totals.mean() - 1.0) <= 3 * se


def test_measure_validation():
    with pytest.raises(ConfigError):
        GmcMeasure(UNIT2, -np.ones((2, 2)))
    with pytest.raises(ConfigError):
        GmcMeasure(UNIT2, np.ones(4))


def test_poisson_points_examples():
    mu = uniform_measure(UNIT2, 16)
    assert len(sample_poisson_points(mu, 1e-12, 3)) <= 2
    with pytest.raises(ConfigError):
        sample_poisson_points(mu, 0, 0)
    counts = np.array([len(sample_poisson_points(mu, 500, s)) for s in range(200)])
    assert abs(counts.mean() - 500) <= 3 * math.sqrt(500 / 200)
    pc = sample_poisson_points(mu, 1000, 7)
    assert np.all(UNIT2.contains(pc.points))
    q = np.bincount(2 * (pc.points[:, 0] >= 0.5) + (pc.points[:, 1] >= 0.5), minlength=4)
    assert stats.chisquare(q).pvalue > 1e-3


def test_poisson_determinism_and_csv():
    mu = gmc_mass(gmc_field(2, 8, 6, 1, 1.0))
    a = sample_poisson_points(mu, 2048, 5)
    b = sample_poisson_points(mu, 2048, 5)
    assert a.points.tobytes() == b.points.tobytes()
    text = a.to_csv()
    assert text.splitlines()[0] == "# d=2 m=2048.0 seed=5"
    back = read_point_cloud(text)
    assert back.points.tobytes() == a.points.tobytes() and back.m == a.m and back.seed == 5
    with pytest.raises(ConfigError):
        read_point_cloud("0.1,0.2\n")


def test_two_cell_split_is_binomial():
    a, b = 0.3, 0.7
    mu = GmcMeasure(Box((0.0, 0.0), (2.0, 1.0)), np.array([[a], [b]]))
    left, total = [], []
    for s in range(500):
        pc = sample_poisson_points(mu, 50, s)
        left.append(int(np.sum(pc.points[:, 0] < 1.0)))
        total.append(len(pc))
    left, total = np.array(left), np.array(total)
    # pool by total count: the left count is Binomial(n, a / (a + b)) given n
    p = a / (a + b)
    expected = np.zeros(2)
    observed = np.zeros(2)
    for n in np.unique(total):
        k = left[total == n]
        observed += [k.sum(), (n - k).sum()]
        expected += [len(k) * n * p, len(k) * n * (1 - p)]
    assert stats.chisquare(observed, expected).pvalue > 1e-3
    # a per-seed goodness of fit over the Binomial pmf of the most common totals
    z = (left - total * p) / np.sqrt(total * p * (1 - p))
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_default_betas():
    bp, bm = default_betas(2, 1.0)
    assert bp == pytest.approx((math.sqrt(2) + 1 / math.sqrt(2)) ** 2)
    assert bm == pytest.approx((math.sqrt(2) - 1 / math.sqrt(2)) ** 2)
    assert default_betas(2, 0.0) == pytest.approx((2.0, 2.0))
    assert default_betas(1, 1.4)[1] == 0.1


def test_holder_uniform():
    mu = uniform_measure(UNIT2, 256)
    rep = check_holder(mu, 2.5, 1.5, [2.0**-k for k in range(4, 7)])
    assert rep.violation_fraction == 0.0
    # r = 1/8 exceeds r^1.5: pi r^2 = 0.049 > 0.044
    r8 = check_holder(mu, 2.5, 1.5, [0.125])
    assert r8.upper_violations[0] == r8.n_probes
    with pytest.raises(ConfigError):
        check_holder(mu, 2.0, 2.0, [0.1])
    with pytest.raises(ConfigError):
        check_holder(mu, 2.0, 1.0, [1e-4])


def test_holder_ball_mass_oracle():
    mu = uniform_measure(UNIT2, 64)
    r = 0.1
    rep = check_holder(mu, 3.0, 1.0, [r])
    c = mu.centers()
    z = c[np.argmin(np.linalg.norm(c - 0.5, axis=1))]
    direct = mu.cell_mass.ravel()[np.linalg.norm(c - z, axis=1) <= r].sum()
    assert rep.min_ratio_lower[0] * r**3 <= direct * (1 + 1e-9)
    assert rep.max_ratio_upper[0] * r >= direct * (1 - 1e-9)


def test_holder_gmc_calibration():
    mu = gmc_mass(gmc_field(2, 8, 6, 0, 1.0))
    bp, bm = default_betas(2, 1.0)
    rep = check_holder(mu, bp, bm, [2.0**-k for k in range(3, 7)])
    assert rep.violation_fraction < 0.05


def test_cell_radii_grid():
    t = build_grid_tiling(UNIT2, 0.25)
    rin, rout = cell_radii(t)
    np.testing.assert_allclose(rin, 0.125)
    np.testing.assert_allclose(rout, 0.125 * math.sqrt(2))


@pytest.mark.parametrize("h", [1 / 8, 1 / 16])
def test_cell_bounds_grid(h):
    t = build_grid_tiling(UNIT2, h)
    rep = check_cell_bounds(t, h**-2, 2.5, 1.5)
    assert rep.passed


def test_cell_bounds_poisson_reports():
    t = poisson_voronoi(2, 4096, 0)
    rep = check_cell_bounds(t, 4096, 2.5, 1.5)
    d = rep.to_dict()
    assert d["n_cells"] == t.n
    assert d["min_inradius"] > 0
    assert len(rep.inradius_violations) == 0


def test_cell_bounds_single_cell_fails():
    t = build_grid_tiling(Box((0.0, 0.0), (2.0, 2.0)), 2.0)
    for m in (2, 10, 1000):
        rep = check_cell_bounds(t, m, 2.5, 1.5)
        assert len(rep.circumradius_violations) == 1


def _lattice(lo, hi, s):
    axes = [np.arange(math.ceil(a / s), math.floor(b / s) + 1) * s for a, b in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)))


def _separation_oracle(P, U, r):
    X = _lattice(np.asarray(U.lo) - 2 * r, np.asarray(U.hi) + 2 * r, r)
    for x in X:
        inside = np.all(np.abs(P - x) <= 2 * r * (1 + 1e-12), axis=1)
        if inside.sum() >= 2:
            return False
    return True


def _covering_oracle(P, U, k, delta):
    Y = _lattice(np.asarray(U.lo) - 2 * k, np.asarray(U.hi) + 2 * k, k)
    for y in Y:
        if not np.any(np.all(np.abs(P - y) <= delta * k, axis=1)):
            return False
    return True


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 40),
       r=st.sampled_from([0.01, 0.02, 0.05, 0.1]))
def test_separation_matches_brute_force(seed, n, r):
    P = np.random.default_rng(seed).random((n, 2))
    U = Box((0.25, 0.25), (0.75, 0.75))
    assert separation_condition(P, U, r).holds == _separation_oracle(P, U, r)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(50, 3000),
       k=st.sampled_from([0.05, 0.1, 0.2]), delta=st.sampled_from([0.1, 0.3, 0.5]))
def test_covering_matches_brute_force(seed, n, k, delta):
    P = np.random.default_rng(seed).uniform(-0.5, 1.5, (n, 2))
    U = Box((0.3, 0.3), (0.7, 0.7))
    assert covering_condition(P, U, k, delta).holds == _covering_oracle(P, U, k, delta)


def test_spread_conditions_imply_radius_bounds():
    # a jittered lattice satisfies both conditions, so the radius bounds follow
    rng = np.random.default_rng(0)
    n = 40
    g = np.stack(np.meshgrid(np.arange(1, n), np.arange(1, n), indexing="ij"), -1).reshape(-1, 2) / n
    P = g + rng.uniform(-0.1, 0.1, g.shape) / n
    box = UNIT2
    t = build_voronoi_tiling(P, box)
    U = Box((0.3, 0.3), (0.7, 0.7))
    sel = np.flatnonzero(U.contains(t.sites))
    rin, rout = cell_radii(t, sel)
    r = 0.1 / n
    assert separation_condition(P, U, r).holds
    assert rin.min() >= r
    k = 1.0 / n
    assert covering_condition(P, U, k, delta=0.5).holds
    assert rout.max() <= 4 * k * math.sqrt(2)
    # a duplicated point breaks separation at any scale
    bad = np.vstack([P, P[sel[0]] + 1e-6])
    rep = separation_condition(bad, U, r)
    assert not rep.holds and rep.witness is not None
    assert not covering_condition(P[P[:, 0] > 0.5], U, k).holds
