import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthowalk.cli import main
from orthowalk.errors import ConfigError
from orthowalk.experiments import ExperimentConfig, build_level, loads_config
from orthowalk.invariants import run_invariants
from orthowalk.io import atomic_write, dumps_tiling, loads_tiling
from orthowalk.tilings import build_counterexample_graph
from helpers import gmc_voronoi, grid, poisson_voronoi


def write_config(tmp_path, name="cfg.json", **kw):
    p = tmp_path / name
    p.write_text(json.dumps(kw, indent=1))
    return str(p)


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# --- configuration ---------------------------------------------------------


def test_config_round_trip():
    cfg = ExperimentConfig(experiment="harmonic-measure", generator="gmc", levels=[1024.0, 4096.0],
                           region={"ball": {"center": [0.5, 0.5], "radius": 0.4}}, seeds=[3, 4], gamma=0.5)
    back = loads_config(cfg.to_json())
    assert back == cfg and back.to_json() == cfg.to_json()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**63), levels=st.lists(st.floats(1, 1e6), min_size=3, max_size=5),
       gamma=st.floats(0, 1.9), dim=st.sampled_from([2, 3]))
def test_config_round_trip_property(seed, levels, gamma, dim):
    cfg = ExperimentConfig(seed=seed, levels=levels, gamma=gamma, dim=dim)
    assert loads_config(cfg.to_json()) == cfg


@pytest.mark.parametrize("text,needle", [
    ('{\n "experiment": "convergence",\n "generatr": "grid"\n}', "line 3"),
    ('{\n "dim": "two"\n}', "'dim'"),
    ('{\n "seed": true\n}', "'seed'"),
    ('{"levels": [1, 2, 3], "harmonic": "nope"}', "harmonic"),
    ('{"levels": [1024]}', "3 levels"),
    ('{"experiment": "solve", "levels": [0.25], "dim": 5, "generator": "grid"}', "dim"),
    ('{"experiment": "solve",', "not valid JSON"),
])
def test_config_errors_name_the_field(text, needle):
    with pytest.raises(ConfigError) as info:
        loads_config(text)
    assert needle in str(info.value)


def test_build_level_out_of_range():
    cfg = ExperimentConfig(experiment="solve", generator="grid", levels=[0.25])
    with pytest.raises(ConfigError):
        build_level(cfg, 3)


# --- tiling files ------------------------------------------------------------


@pytest.mark.parametrize("maker", [lambda: grid(2, 0.25), lambda: poisson_voronoi(3, 512, 0),
                                   lambda: gmc_voronoi(1.0, 1024), lambda: build_counterexample_graph(3, 2, 4)])
def test_tiling_json_round_trip(maker):
    t = maker()
    text = dumps_tiling(t)
    back = loads_tiling(text)
    assert dumps_tiling(back) == text
    np.testing.assert_array_equal(back.sites, t.sites)
    np.testing.assert_array_equal(back.edges.conductance, t.edges.conductance)


def test_tiling_json_errors():
    with pytest.raises(ConfigError):
        loads_tiling("{")
    with pytest.raises(ConfigError):
        loads_tiling('{"dim": 2}')


def test_atomic_write_keeps_old_file(tmp_path):
    p = tmp_path / "out.txt"
    atomic_write(p, "old\n")

    with pytest.raises(TypeError):
        atomic_write(p, 12345)
    assert p.read_text() == "old\n"
    assert [q.name for q in tmp_path.iterdir()] == ["out.txt"]


def test_invariants_negative_controls():
    t = poisson_voronoi(2, 1024, 0)
    assert all(r.passed for r in run_invariants(t))
    data = json.loads(dumps_tiling(t))
    data["edges"][5]["conductance"] *= 1.5
    bad = loads_tiling(json.dumps(data))
    failed = {r.name for r in run_invariants(bad) if not r.passed}
    assert "conductance_definition" in failed
    data = json.loads(dumps_tiling(t))
    i = int(np.argmin(np.linalg.norm(t.sites - 0.5, axis=1)))
    data["sites"][i] = [data["sites"][i][0] + 0.2, data["sites"][i][1]]
    moved = loads_tiling(json.dumps(data))
    failed = {r.name for r in run_invariants(moved) if not r.passed}
    assert "orthogonality" in failed


# --- the command line --------------------------------------------------------


def test_generate_grid_and_verify(tmp_path, capsys):
    cfg = write_config(tmp_path, experiment="generate", generator="grid", levels=[0.25])
    out = str(tmp_path / "t.json")
    assert main(["generate", "--config", cfg, "--out", out]) == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["n_sites"] == 16
    assert len(json.load(open(out))["cells"]) == 16
    rep = str(tmp_path / "v.json")
    assert main(["verify", out, "--out", rep]) == 0
    assert json.load(open(rep))["passed"]


def test_generate_gmc_is_deterministic(tmp_path):
    cfg = write_config(tmp_path, experiment="generate", generator="gmc", gamma=1.0, J=8, K=6,
                       levels=[4096], seed=7)
    a, b = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    assert main(["generate", "--config", cfg, "--out", a]) == 0
    assert main(["generate", "--config", cfg, "--out", b]) == 0
    assert sha(a) == sha(b)
    c = str(tmp_path / "c.json")
    assert main(["generate", "--config", cfg, "--out", c, "--seed", "8"]) == 0
    assert sha(a) != sha(c)


def test_malformed_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n "experiment": "generate",\n "generatr": "grid"\n}\n')
    out = tmp_path / "never.json"
    assert main(["generate", "--config", str(p), "--out", str(out)]) == 2
    assert "line 3" in capsys.readouterr().err
    assert not out.exists()
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["verify", str(tmp_path / "missing.json")]) == 2


def test_verify_negative_controls(tmp_path):
    t = poisson_voronoi(2, 1024, 0)
    data = json.loads(dumps_tiling(t))
    data["edges"][3]["conductance"] += 0.25
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(data))
    rep = tmp_path / "rep.json"
    assert main(["verify", str(p), "--out", str(rep)]) == 4
    names = [f["invariant"] for f in json.load(open(rep))["failures"]]
    assert "conductance_definition" in names
    assert main(["verify", str(p), "--out", str(rep)]) == 4


def test_numerical_failure_exit_code(tmp_path):
    cfg = write_config(tmp_path, experiment="walk", generator="grid", levels=[1 / 32], max_steps=3,
                       region={"box": [[0.05, 0.95], [0.05, 0.95]]}, starts=[[0.5, 0.5]])
    assert main(["walk", "--config", cfg, "--out", str(tmp_path / "w.json")]) == 3


def test_solve_grid_is_exact(tmp_path):
    cfg = write_config(tmp_path, experiment="solve", generator="grid", levels=[1 / 16])
    out = tmp_path / "s.csv"
    assert main(["solve", "--config", cfg, "--out", str(out)]) == 0
    text = out.read_text().splitlines()
    lines = [ln for ln in text if not ln.startswith("#")]
    head = lines[0].split(",")
    vals = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    err = np.abs(vals[:, head.index("h_D")] - vals[:, head.index("h_C")])
    assert err.max() <= 1e-8
    assert float([ln for ln in text if ln.startswith("# sup_error=")][0].split("=")[1]) <= 1e-8


def test_walk_trace_outputs(tmp_path):
    cfg = write_config(tmp_path, experiment="walk", generator="voronoi", levels=[1024],
                       region={"ball": {"center": [0.5, 0.5], "radius": 0.3}})
    js, cs = tmp_path / "w.json", tmp_path / "w.csv"
    assert main(["walk", "--config", cfg, "--out", str(js)]) == 0
    assert main(["walk", "--config", cfg, "--out", str(cs)]) == 0
    trace = json.load(open(js))
    rows = cs.read_text().splitlines()
    assert rows[0] == "step,vertex_index,x1,x2"
    assert len(rows) - 1 == len(trace["records"])


def test_counterexample_command(tmp_path):
    cfg = write_config(tmp_path, experiment="counterexample", generator="counterexample", dim=3,
                       levels=[2, 5, 10, 20], T=[4], n_walks=2000, seed=3)
    out = tmp_path / "c.csv"
    assert main(["counterexample", "--config", cfg, "--out", str(out)]) == 0
    lines = [ln.split(",") for ln in out.read_text().splitlines() if not ln.startswith("#")]
    head, rows = lines[0], lines[1:]
    p = np.array([float(r[head.index("p_exact")]) for r in rows])
    f = np.array([float(r[head.index("formula")]) for r in rows])
    np.testing.assert_allclose(p, f, atol=1e-8)
    assert np.all(np.diff(1 - p) > 0)


def test_harmonic_measure_grid_center(tmp_path):
    from orthowalk.fvm import Ball, subdomain
    from orthowalk.harmonic import discrete_harmonic_measure
    t = grid(2, 1 / 16)
    sub = subdomain(t, Ball((0.5, 0.5), 0.4))
    # 0.5 is a grid corner, so the start vertex is the site nearest the centre
    v = int(np.argmin(np.linalg.norm(t.sites - 0.5, axis=1)))
    mu = discrete_harmonic_measure(t, sub, v)
    np.testing.assert_allclose(mu.probs @ mu.positions, t.sites[v], atol=1e-8)
    from orthowalk.harmonic import weak_distance
    _, diffs = weak_distance(mu, t, t.sites[v], ball=Ball((0.5, 0.5), 0.4), return_all=True)
    assert diffs["1"] == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("cmd,kw", [
    ("convergence", dict(experiment="convergence", generator="voronoi", levels=[256, 512, 1024])),
    ("harmonic-measure", dict(experiment="harmonic-measure", generator="voronoi", levels=[256, 512, 1024],
                              region={"ball": {"center": [0.5, 0.5], "radius": 0.35}})),
    ("counterexample", dict(experiment="counterexample", generator="counterexample", dim=3,
                            levels=[2, 5], T=[4, 6], n_walks=3000)),
])
def test_outputs_independent_of_threads(tmp_path, cmd, kw):
    cfg = write_config(tmp_path, seed=11, **kw)
    outs = []
    for th in ("1", "4"):
        o = str(tmp_path / f"{cmd}-{th}.csv")
        assert main([cmd, "--config", cfg, "--out", o, "--threads", th]) == 0
        outs.append(sha(o))
    assert outs[0] == outs[1]


def test_thread_env_var(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, experiment="counterexample", generator="counterexample", dim=3, levels=[2])
    monkeypatch.setenv("ORTHOWALK_THREADS", "zero")
    assert main(["counterexample", "--config", cfg]) == 2
    monkeypatch.setenv("ORTHOWALK_THREADS", "2")
    assert main(["counterexample", "--config", cfg, "--out", str(tmp_path / "o.csv")]) == 0


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path, experiment="generate", generator="grid", levels=[0.5])
    r = subprocess.run([sys.executable, "-m", "orthowalk.cli", "generate", "--config", cfg],
                       capture_output=True, text=True, check=False)
    assert r.returncode == 0
    assert loads_tiling(r.stdout).n == 4
    assert json.loads(r.stderr)["n_sites"] == 4
