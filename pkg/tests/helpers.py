"""Cached tiling builders shared by the unit and acceptance tests."""
from functools import lru_cache

import numpy as np

from orthowalk.geometry import Box
from orthowalk.gmc import gmc_mass, sample_log_correlated_field, sample_poisson_points, uniform_measure
from orthowalk.tilings import build_grid_tiling, build_voronoi_tiling


@lru_cache(maxsize=None)
def grid(d, h):
    return build_grid_tiling(Box.unit(d), h)


@lru_cache(maxsize=None)
def poisson_voronoi(d, m, seed=0):
    box = Box.unit(d)
    cloud = sample_poisson_points(uniform_measure(box, 1), m, seed)
    return build_voronoi_tiling(cloud.points, box, meta={"generator": "voronoi", "m": m, "seed": seed})


@lru_cache(maxsize=None)
def gmc_field(d, J, K, seed, gamma):
    return sample_log_correlated_field(Box.unit(d), J, K, seed, gamma)


@lru_cache(maxsize=None)
def gmc_voronoi(gamma, m, seed=0, d=2, J=8, K=6):
    mu = gmc_mass(gmc_field(d, J, K, seed, gamma))
    cloud = sample_poisson_points(mu, m, seed + 1)
    return build_voronoi_tiling(cloud.points, Box.unit(d), meta={"generator": "gmc", "m": m, "seed": seed})


def inner_box(d, margin):
    return Box((margin,) * d, (1.0 - margin,) * d)


def random_points(n, d, seed):
    return np.random.default_rng(seed).random((n, d))
