"""Configuration files and the command-line surface."""

import json
import os

import numpy as np
import pytest

from slowfast import config as cf
from slowfast import cli
from slowfast.errors import SlowfastError

CANONICAL_TOML = """
[fields]
F = "sphere"
G = "double-well"
beta = 0.1

[noise]
kind = "tangent-projection"
scale = 1.0

[parameters]
z = 0.5
epsilon = 1e-3
delta = 0.2
"""

EXPRESSION_TOML = """
[fields]
F = "x1^2/2 + x2^2/2 + x3^2/2"
G = "x3 - x1^2 + 1"

[perturbation]
kind = "gradient-of-G"

[noise]
kind = "none"

[parameters]
z = 0.5
x0 = [0.0, 0.8660254037844386, -0.5]
epsilon = 1e-3
"""

TORUS_TOML = """
[torus]
z = 0.25
epsilon = 1e-3
delta = 0.1
"""


def _write(tmp_path, text, name="sys.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_canonical_config_roundtrip(tmp_path):
    sys_ = cf.build_system(cf.load_config(_write(tmp_path, CANONICAL_TOML)))
    assert sys_.meta["family"] == "canonical-sphere"
    assert sys_.meta["beta"] == 0.1
    assert sys_.delta == 0.2
    assert sys_.noise is not None


def test_expression_config_matches_builtin(tmp_path):
    sys_e = cf.build_system(cf.load_config(_write(tmp_path, EXPRESSION_TOML)))
    from slowfast.fields import canonical_sphere_system
    sys_b = canonical_sphere_system()
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((50, 3))
    assert np.max(np.abs(sys_e.F.value(pts) - sys_b.F.value(pts))) < 1e-12
    assert np.max(np.abs(sys_e.G.value(pts) - sys_b.G.value(pts))) < 1e-12
    # finite-difference derivatives are close to the analytic ones
    assert np.max(np.abs(sys_e.G.gradient(pts) - sys_b.G.gradient(pts))) < 1e-8


def test_expression_requires_base_point(tmp_path):
    text = EXPRESSION_TOML.replace("x0 = [0.0, 0.8660254037844386, -0.5]\n", "")
    with pytest.raises(SlowfastError):
        cf.build_system(cf.load_config(_write(tmp_path, text)))


def test_torus_config(tmp_path):
    tsys = cf.build_system(cf.load_config(_write(tmp_path, TORUS_TOML)))
    assert tsys.meta["family"] == "canonical-torus"
    assert len(tsys.wells) == 2


def test_cli_simulate_writes_records(tmp_path):
    out = tmp_path / "out"
    rc = cli.main(["simulate", "--kind", "unperturbed", "--t-end", "0.02",
                   "--step", "1e-3", "--out", str(out)])
    assert rc == 0
    lines = (out / "trajectory_unperturbed.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    assert set(rec) == {"t", "x", "g", "event"}


def test_cli_metastable_report(tmp_path):
    out = tmp_path / "out"
    rc = cli.main(["metastable", "--config",
                   _write(tmp_path, CANONICAL_TOML), "--out", str(out)])
    assert rc == 0
    rep = json.load(open(out / "metastable_report.json"))
    assert {"lambda1", "lambda3", "decision_table"} <= set(rep)


def test_cli_coeffs_csv(tmp_path):
    out = tmp_path / "out"
    rc = cli.main(["coeffs", "--out", str(out), "--n-grid", "9"])
    assert rc == 0
    header = (out / "edge_coefficients.csv").read_text().splitlines()[0]
    assert header == "edge,g,T,A,A1,A2,B"
    assert (out / "saddle.csv").exists()


def test_cli_graphsim(tmp_path):
    out = tmp_path / "out"
    rc = cli.main(["graphsim", "--runs", "2", "--t-end", "2.0", "--out", str(out)])
    assert rc == 0
    lines = (out / "graph_paths.csv").read_text().splitlines()
    assert lines[0] == "run,t,edge,g"
    assert len(lines) > 10


def test_cli_experiment_rotation(tmp_path):
    out = tmp_path / "out"
    rc = cli.main(["experiment", "rotation", "--out", str(out),
                   "--eps", "1e-3,3e-4"])
    assert rc == 0
