"""Experiment configuration and the reproducible study runners behind the CLI.

Every runner is a pure function of its :class:`ExperimentConfig` (seed
included).  Thread counts only change how work is scheduled, never what is
computed, so the CSV/JSON artifacts are byte-identical across ``--threads``.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigError
from .fvm import Ball, dirichlet_energy, subdomain
from .geometry import Box
from .gmc import gmc_mass, sample_log_correlated_field, sample_poisson_points, uniform_measure
from .harmonic import (
    discrete_harmonic_measure,
    fit_decay_constant,
    solve_dirichlet,
    sup_error_bound_2d,
    weak_distance,
)
from .testfunctions import HARMONIC_IDS, harmonic_polynomial
from .tilings import build_counterexample_graph, build_grid_tiling, build_voronoi_tiling, nearest_vertex
from .walks import counterexample_experiment, run_until_exit, walk_stream

__all__ = [
    "ExperimentConfig",
    "ConvergenceRow",
    "loads_config",
    "load_config",
    "derive_seed",
    "build_level",
    "config_region",
    "run_convergence",
    "convergence_csv",
    "run_counterexample",
    "counterexample_csv",
    "run_harmonic_measure",
    "harmonic_measure_csv",
    "run_solve",
    "run_walk",
]

EXPERIMENTS = ("generate", "solve", "walk", "harmonic-measure", "counterexample", "convergence")
GENERATORS = ("grid", "voronoi", "gmc", "counterexample")


@dataclass
class ExperimentConfig:
    """Parameters of one experiment, stored as a flat JSON object.

    ``levels`` holds the refinement sequence: grid spacings ``h`` for
    ``generator="grid"``, Poisson intensities ``m`` for ``"voronoi"`` and
    ``"gmc"``, and layer counts ``N`` for ``"counterexample"``.  Level ``i``
    draws from ``seeds[i]`` when given, else from ``seed + i``.
    """

    experiment: str = "convergence"
    generator: str = "voronoi"
    dim: int = 2
    levels: list = field(default_factory=lambda: [1024.0])
    box: Optional[list] = None
    region: Optional[dict] = None
    harmonic: str = "x1^2-x2^2"
    gamma: float = 1.0
    J: int = 8
    K: int = 6
    T: list = field(default_factory=lambda: [4])
    n_walks: int = 0
    seed: int = 0
    seeds: Optional[list] = None
    starts: Optional[list] = None
    L: int = 4
    max_steps: int = 10**8
    tiling: Optional[str] = None

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def level_seed(self, i):
        return int(self.seeds[i]) if self.seeds else int(self.seed) + i

    @property
    def domain_box(self):
        return Box.unit(self.dim) if self.box is None else Box.from_pairs(self.box)

    def validate(self, text=None):
        def fail(name, msg):
            raise ConfigError(f"field {name!r}{_line_suffix(text, name)}: {msg}")

        if self.experiment not in EXPERIMENTS:
            fail("experiment", f"must be one of {EXPERIMENTS}")
        if self.generator not in GENERATORS:
            fail("generator", f"must be one of {GENERATORS}")
        if self.generator == "counterexample":
            if self.dim < 3:
                fail("dim", "counterexample needs dim >= 3")
        elif self.dim not in (2, 3):
            fail("dim", "tilings are built for dim 2 or 3")
        if not self.levels:
            fail("levels", "at least one level is required")
        if any(not (isinstance(x, (int, float)) and x > 0) for x in self.levels):
            fail("levels", "levels must be positive numbers")
        if self.experiment == "convergence" and len(self.levels) < 3:
            fail("levels", "a convergence study needs at least 3 levels")
        if self.harmonic not in HARMONIC_IDS:
            fail("harmonic", f"unknown id; choose from {HARMONIC_IDS}")
        if self.harmonic == "x1x2x3" and self.dim < 3:
            fail("harmonic", "x1x2x3 needs dim >= 3")
        if self.seeds is not None and len(self.seeds) < len(self.levels):
            fail("seeds", "need one seed per level")
        if self.seed < 0:
            fail("seed", "must be nonnegative")
        if self.region is not None and not ({"box"} == set(self.region) or {"ball"} == set(self.region)):
            fail("region", "must be {'box': [[lo, hi], ...]} or {'ball': {'center': [...], 'radius': r}}")
        if self.box is not None:
            try:
                b = Box.from_pairs(self.box)
            except (TypeError, ValueError, IndexError) as exc:
                fail("box", str(exc))
            if b.dim != self.dim:
                fail("box", "dimension differs from 'dim'")
        if self.starts is not None and any(len(s) != self.dim for s in self.starts):
            fail("starts", "every start needs 'dim' coordinates")
        return self


_TYPES = {
    "experiment": str, "generator": str, "dim": int, "levels": list, "box": (list, type(None)),
    "region": (dict, type(None)), "harmonic": str, "gamma": (int, float), "J": int, "K": int,
    "T": list, "n_walks": int, "seed": int, "seeds": (list, type(None)), "starts": (list, type(None)),
    "L": int, "max_steps": int, "tiling": (str, type(None)),
}


def _line_suffix(text, key):
    if not text:
        return ""
    for n, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return f" (line {n})"
    return ""


def loads_config(text) -> ExperimentConfig:
    """Parse and validate a JSON config, naming the offending field and line."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    for key, val in data.items():
        if key not in known:
            raise ConfigError(f"unknown field {key!r}{_line_suffix(text, key)}")
        typ = _TYPES[key]
        if isinstance(val, bool) or not isinstance(val, typ):
            raise ConfigError(f"field {key!r}{_line_suffix(text, key)}: wrong type {type(val).__name__}")
    return ExperimentConfig(**data).validate(text)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads_config(fh.read())


def derive_seed(seed, tag):
    """Independent 63-bit seed for sub-task ``tag`` of a run seeded by ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1, np.uint64)[0] >> 1)


def config_region(cfg):
    """Active region ``U``; defaults to the box shrunk by 10% of each side."""
    if cfg.region is None:
        b = cfg.domain_box
        pad = 0.1 * b.sides
        return Box(tuple(b.lo_arr + pad), tuple(b.hi_arr - pad))
    if "box" in cfg.region:
        return Box.from_pairs(cfg.region["box"])
    spec = cfg.region["ball"]
    return Ball(tuple(spec["center"]), float(spec["radius"]))


def build_level(cfg, i, T=None):
    """Tiling (or counterexample graph) of refinement level ``i``."""
    if not 0 <= i < len(cfg.levels):
        raise ConfigError(f"level {i} out of range for {len(cfg.levels)} levels")
    lvl = cfg.levels[i]
    seed = cfg.level_seed(i)
    box = cfg.domain_box
    if cfg.generator == "grid":
        return build_grid_tiling(box, float(lvl))
    if cfg.generator == "counterexample":
        return build_counterexample_graph(cfg.dim, int(lvl), int(T if T is not None else cfg.T[0]))
    if cfg.generator == "voronoi":
        mu = uniform_measure(box, 1)
    else:
        fld = sample_log_correlated_field(box, cfg.J, cfg.K, derive_seed(seed, 1), cfg.gamma)
        mu = gmc_mass(fld)
    cloud = sample_poisson_points(mu, float(lvl), derive_seed(seed, 2))
    meta = {"generator": cfg.generator, "seed": seed, "m": float(lvl)}
    if cfg.generator == "gmc":
        meta.update(gamma=cfg.gamma, J=cfg.J, K=cfg.K)
    return build_voronoi_tiling(cloud.points, box, meta=meta)


def _pool_map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# convergence


@dataclass
class ConvergenceRow:
    """One refinement level of a Dirichlet convergence study.

    ``energy_bound = 9 M^2 eps^2 dual_volume_sum``.  In 2D ``sup_bound``
    is the explicit sup-norm bound; in higher dimension it is the rate
    ``M eps log(1/eps)`` without its unknown constant, and ``sup_bound_ok``
    is None.  ``clipped_interior`` counts interior sites whose cells touch
    the sampling box; such sites are not interior vertices of an orthogonal
    tiling, so the bounds only apply to rows where it is zero.
    """

    level: int
    parameter: float
    n_sites: int
    epsilon: float
    M: float
    L: float
    closure_volume: float
    dual_volume_sum: float
    sup_error: float
    energy: float
    energy_bound: float
    sup_bound: float
    dim: int = 2
    clipped_interior: int = 0

    @property
    def energy_ok(self):
        return bool(self.energy <= self.energy_bound + 1e-9)

    @property
    def sup_bound_ok(self):
        if self.dim != 2:
            return None
        return bool(self.sup_error <= self.sup_bound)

    def as_list(self):
        th = self.sup_bound_ok
        return [self.level, self.parameter, self.n_sites, self.epsilon, self.M, self.L,
                self.closure_volume, self.dual_volume_sum, self.sup_error, self.energy,
                self.energy_bound, self.sup_bound, self.clipped_interior, int(self.energy_ok),
                "na" if th is None else int(th)]


CONVERGENCE_COLUMNS = ["level", "parameter", "n_sites", "epsilon", "M", "L", "closure_volume",
                       "dual_volume_sum", "sup_error", "energy", "energy_bound", "sup_bound",
                       "clipped_interior", "energy_ok", "sup_bound_ok"]


def convergence_level(t, U, h, level=0, parameter=float("nan")):
    """Solve the Dirichlet problem for ``h`` on ``U`` and measure the error."""
    sub = subdomain(t, U)
    sol = solve_dirichlet(t, sub, h)
    hD = sol.full(0.0)
    exact = h(t.sites)
    diff = np.zeros(t.n)
    cl = sub.closure
    diff[cl] = hD[cl] - exact[cl]
    diff[sub.boundary] = 0.0
    sup_err = float(np.abs(diff[sub.interior]).max())
    bb = sub.closure_bounding_box(t)
    M = h.hess_sup(bb)
    Lg = h.grad_sup(bb)
    eps = sub.closure_epsilon(t)
    vol = sub.closure_volume
    S = sub.sum_dual_volumes(t)
    energy = dirichlet_energy(t, sub, diff)
    if t.dim == 2:
        tb, _ = sup_error_bound_2d(M, eps, vol, Lg)
    else:
        tb = max(M, 1.0) * eps * math.log(1.0 / eps)
    clipped = int(np.intersect1d(sub.clipped, sub.interior).size)
    return ConvergenceRow(level, float(parameter), t.n, eps, M, Lg, vol, S, sup_err, energy,
                          9.0 * M * M * eps * eps * S, float(tb), t.dim, clipped)


def run_convergence(cfg, threads=1):
    """Rows of a convergence study and the fitted trend.

    Returns ``(rows, fit)`` where ``fit`` holds the least-squares log-log
    slope of ``sup_error`` against ``epsilon`` and, in dimension 3 and up,
    the fitted constant of the ``eps log(1/eps)`` rate with its per-level
    residual factors.
    """
    h = harmonic_polynomial(cfg.harmonic, cfg.dim)
    U = config_region(cfg)

    def one(i):
        t = build_level(cfg, i)
        return convergence_level(t, U, h, i, cfg.levels[i])

    rows = _pool_map(one, list(range(len(cfg.levels))), threads)
    return rows, convergence_fit(rows)


def convergence_fit(rows):
    eps = np.array([r.epsilon for r in rows])
    err = np.array([r.sup_error for r in rows])
    fit = {}
    if np.all(err > 0) and len(rows) >= 2:
        fit["log_log_slope"] = float(np.polyfit(np.log(eps), np.log(err), 1)[0])
    if rows and rows[0].dim >= 3 and np.all(err > 0):
        C, ratios = fit_decay_constant(err, eps, [r.M for r in rows])
        fit["decay_constant"] = C
        fit["residual_factors"] = [float(x) for x in ratios]
    return fit


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _csv(header_meta, columns, rows, trailer=()):
    lines = [f"# {k}={v}" for k, v in header_meta]
    lines.append(",".join(columns))
    lines += [",".join(_fmt(x) for x in r) for r in rows]
    lines += [f"# {k}={v}" for k, v in trailer]
    return "\n".join(lines) + "\n"


def _meta(cfg):
    return [("orthowalk", __version__), ("seed", cfg.seed),
            ("config", json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":")))]


def convergence_csv(cfg, rows, fit):
    trailer = [(k, json.dumps(v) if isinstance(v, list) else _fmt(v)) for k, v in sorted(fit.items())]
    return _csv(_meta(cfg), CONVERGENCE_COLUMNS, [r.as_list() for r in rows], trailer)


# ---------------------------------------------------------------------------
# counterexample


COUNTEREXAMPLE_COLUMNS = ["d", "N", "T", "p_exact", "formula", "abs_error", "p_mc", "mc_stderr", "n_walks"]


def run_counterexample(cfg, threads=1):
    """Exact and Monte Carlo hitting probabilities over ``levels`` x ``T``."""
    out = []
    for i, N in enumerate(cfg.levels):
        for T in cfg.T:
            r = counterexample_experiment(cfg.dim, int(N), int(T), cfg.n_walks,
                                          cfg.level_seed(i), threads)
            out.append(r)
    return out


def counterexample_csv(cfg, results):
    rows = [[r.d, r.N, r.T, r.p_exact, r.formula, abs(r.p_exact - r.formula), r.p_mc,
             r.mc_stderr, r.n_walks] for r in results]
    return _csv(_meta(cfg), COUNTEREXAMPLE_COLUMNS, rows)


# ---------------------------------------------------------------------------
# harmonic measure


HARMONIC_MEASURE_COLUMNS = ["level", "parameter", "start", "vertex", "epsilon", "weak_distance",
                            "martingale_error", "martingale_ok"]


def default_starts(ball, d, n=5):
    """Ball centre plus points at 0.4 radius along the first axes (both signs)."""
    c = np.asarray(ball.center, dtype=float)
    pts = [c]
    for k in range(n - 1):
        e = np.zeros(d)
        e[(k // 2) % d] = 1.0 if k % 2 == 0 else -1.0
        pts.append(c + 0.4 * ball.radius * e)
    return [p.tolist() for p in pts]


def harmonic_measure_level(t, ball, starts, L=4):
    sub = subdomain(t, ball)
    eps = sub.closure_epsilon(t)
    out = []
    for s, z in enumerate(starts):
        v = nearest_vertex(t, z)
        mu = discrete_harmonic_measure(t, sub, v)
        wd = weak_distance(mu, t, t.sites[v], L=L, ball=ball)
        mart = float(np.abs(mu.probs @ mu.positions - t.sites[v]).max())
        out.append((s, v, eps, wd, mart))
    return out


def run_harmonic_measure(cfg, threads=1):
    """Weak distance and exit-position martingale error per level and start."""
    U = config_region(cfg)
    if not isinstance(U, Ball):
        raise ConfigError("field 'region': harmonic-measure needs a ball region")
    starts = cfg.starts if cfg.starts is not None else default_starts(U, cfg.dim)

    def one(i):
        t = build_level(cfg, i)
        return [(i, cfg.levels[i]) + r for r in harmonic_measure_level(t, U, starts, cfg.L)]

    rows = []
    for block in _pool_map(one, list(range(len(cfg.levels))), threads):
        rows += block
    return rows


def harmonic_measure_csv(cfg, rows):
    body = [[i, float(p), s, v, eps, wd, mart, int(mart <= eps)] for i, p, s, v, eps, wd, mart in rows]
    return _csv(_meta(cfg), HARMONIC_MEASURE_COLUMNS, body)


# ---------------------------------------------------------------------------
# single solves and walks


def run_solve(cfg, t):
    """CSV of ``site, x.., h_D, h_C`` over the closure of the region."""
    h = harmonic_polynomial(cfg.harmonic, cfg.dim)
    sub = subdomain(t, config_region(cfg))
    sol = solve_dirichlet(t, sub, h)
    hD = sol.full()
    exact = h(t.sites)
    cols = ["site"] + [f"x{i + 1}" for i in range(t.dim)] + ["boundary", "h_D", "h_C"]
    bmask = sub.boundary_mask
    rows = [[int(v)] + [float(c) for c in t.sites[v]] + [int(bmask[v]), float(hD[v]), float(exact[v])]
            for v in sub.closure]
    trailer = [("sup_error", _fmt(float(np.abs(hD[sub.interior] - exact[sub.interior]).max()))),
               ("cg_iterations", sol.iterations)]
    return _csv(_meta(cfg), cols, rows, trailer)


def run_walk(cfg, t, start=None):
    """One walk from ``start`` (default: first configured start or region centre) to exit."""
    U = config_region(cfg)
    sub = subdomain(t, U)
    if start is None:
        if cfg.starts:
            start = cfg.starts[0]
        else:
            start = (U.center if isinstance(U, Box) else np.asarray(U.center)).tolist()
    rng = walk_stream(cfg.seed, 0)
    return run_until_exit(t, sub, start, rng, cfg.max_steps)
