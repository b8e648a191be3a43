"""Critical points, curve tracing, loop functionals and the quotient graph."""

import numpy as np
import pytest

from slowfast import fields as fl
from slowfast import levelsets as lv
from slowfast.errors import (CurveEscapeError, EdgeRangeError,
                             NonGenericLevelsError, SeparatrixAmbiguityError)

MIRROR = np.array([-1.0, 1.0, 1.0])


def test_canonical_critical_points(sym_sys):
    crit = lv.find_critical_points(sym_sys, n_starts=200)
    assert len(crit) == 4
    kinds = sorted(c.kind for c in crit)
    assert kinds == ["max", "min", "min", "saddle"]
    mins = [c for c in crit if c.kind == "min"]
    assert all(abs(c.g + 0.25) < 1e-10 for c in mins)
    xs = sorted(round(c.x[0], 6) for c in mins)
    assert np.allclose(xs, [-np.sqrt(3) / 2, np.sqrt(3) / 2])
    sad = next(c for c in crit if c.kind == "saddle")
    assert np.allclose(sad.x, [0, 0, -1], atol=1e-9) and abs(sad.g) < 1e-10
    top = next(c for c in crit if c.kind == "max")
    assert np.allclose(top.x, [0, 0, 1], atol=1e-9) and abs(top.g - 2.0) < 1e-10
    assert mins[0].stability == "asymptotically-stable"


def test_asymmetric_morse_count():
    sys_a = fl.canonical_sphere_system(beta=0.1)
    crit = lv.find_critical_points(sys_a, n_starts=200)
    counts = {k: sum(c.kind == k for c in crit) for k in ("min", "saddle", "max")}
    assert counts == {"min": 2, "saddle": 1, "max": 1}
    assert counts["min"] - counts["saddle"] + counts["max"] == 2
    gs = sorted(c.g for c in crit if c.kind == "min")
    assert gs[1] - gs[0] > 0.05  # the asymmetry splits the well levels


def test_height_function_two_points():
    sys_h = fl.cap_system()
    crit = lv.find_critical_points(sys_h, n_starts=150)
    assert sorted(c.kind for c in crit) == ["max", "min"]


def test_trace_components(sym_ctx):
    sys_, graph = sym_ctx.sys, sym_ctx.graph
    c2 = lv.trace_level_curve(sys_, 0.5, graph.seed(2, 0.5))
    assert np.max(np.abs(sys_.G.value(c2.points) - 0.5)) < 1e-8
    assert np.max(np.abs(sys_.F.value(c2.points) - 0.5)) < 1e-9
    assert np.linalg.norm(c2.points[0] - c2.points[-1]) < 1e-5
    # below the saddle: two mirror components with equal periods
    s1 = graph.seed(1, -0.1)
    c1 = lv.trace_level_curve(sys_, -0.1, s1)
    c3 = lv.trace_level_curve(sys_, -0.1, s1 * MIRROR)
    assert abs(c1.period - c3.period) < 1e-8


def test_period_log_divergence(sym_ctx):
    gs = [1e-2, 1e-3, 1e-4, 1e-5]
    Ts = [lv.trace_level_curve(sym_ctx.sys, g, sym_ctx.graph.seed(2, g)).period
          for g in gs]
    r = np.corrcoef(np.abs(np.log(gs)), Ts)[0, 1]
    assert r > 0.99
    assert Ts == sorted(Ts)


def test_period_matches_linearization(sym_ctx):
    m = sym_ctx.graph.edge(1).minimum
    T_lin = lv.linearized_period(sym_ctx.sys, m)
    g = m.g + 1e-4
    seed = lv.point_at_level(sym_ctx.sys, lv._well_anchor(sym_ctx.sys, m), g)
    c = lv.trace_level_curve(sym_ctx.sys, g, seed)
    assert abs(c.period - T_lin) / T_lin < 0.01


def test_line_functional_basics(sym_ctx):
    c = lv.trace_level_curve(sym_ctx.sys, 0.5, sym_ctx.graph.seed(2, 0.5))
    # unit integrand gives the period
    assert abs(lv.line_functional(c, lambda p: np.ones(len(p))) - c.period) < 1e-12
    # integrand orthogonal to the drive vanishes pointwise
    def phi(p):
        v = np.cross(sym_ctx.sys.F.gradient(p), sym_ctx.sys.G.gradient(p))
        return np.sum(sym_ctx.sys.G.gradient(p) * v, axis=-1)
    assert abs(lv.line_functional(c, phi)) < 1e-10


def test_mirror_functional_equality(sym_ctx):
    seed = sym_ctx.graph.seed(1, -0.1)
    c1 = lv.trace_level_curve(sym_ctx.sys, -0.1, seed)
    c3 = lv.trace_level_curve(sym_ctx.sys, -0.1, seed * MIRROR)

    def phi_even(p):
        return np.linalg.norm(np.cross(sym_ctx.sys.F.gradient(p),
                                       sym_ctx.sys.G.gradient(p)), axis=-1)
    assert abs(lv.line_functional(c1, phi_even) - lv.line_functional(c3, phi_even)) < 1e-8


def test_functional_resolution_invariance(sym_ctx):
    seed = sym_ctx.graph.seed(2, 0.3)
    coarse = lv.trace_level_curve(sym_ctx.sys, 0.3, seed)
    fine = lv.trace_level_curve(sym_ctx.sys, 0.3, seed, max_step=0.005, curv_target=0.0075)
    assert abs(coarse.period - fine.period) / fine.period < 1e-6

    def phi(p):
        return np.sum(sym_ctx.sys.G.gradient(p) ** 2, axis=-1)
    a = lv.line_functional(coarse, phi)
    b = lv.line_functional(fine, phi)
    assert abs(a - b) / abs(b) < 1e-6


def test_reeb_graph_canonical(sym_ctx):
    graph = sym_ctx.graph
    assert len(graph.edges) == 3
    assert len(graph.vertices) == 4
    e1, e2, e3 = graph.edge(1), graph.edge(2), graph.edge(3)
    assert e1.minimum is not None and e3.minimum is not None
    assert e1.minimum.x[0] > 0 > e3.minimum.x[0]
    assert abs(e1.g_lo + 0.25) < 1e-9 and abs(e1.g_hi) < 1e-9
    assert abs(e2.g_lo) < 1e-9 and abs(e2.g_hi - 1.5) < 1e-9
    kinds = sorted(v.kind for v in graph.vertices.values())
    assert kinds == ["boundary-P", "extremum", "extremum", "saddle"]
    # tree consistency: one fewer edge than vertices
    assert len(graph.edges) == len(graph.vertices) - 1


def test_reeb_graph_cap():
    sys_h = fl.cap_system()
    graph = lv.build_reeb_graph(sys_h, n_starts=150)
    assert len(graph.edges) == 1
    assert len(graph.vertices) == 2
    e = graph.edge(1)
    assert abs(e.g_lo + 1.0) < 1e-9
    assert abs(e.g_hi - sys_h.G.value(sys_h.x0) - 1.0) < 1e-9


def _gaussian_dip(center, depth, width):
    c = np.asarray(center, float)
    c = c / np.linalg.norm(c)

    def value(x):
        x = np.asarray(x, float)
        return -depth * np.exp(-np.sum((x - c) ** 2, axis=-1) / width)

    def gradient(x):
        x = np.asarray(x, float)
        v = value(x)
        return (-2.0 / width) * (x - c) * v[..., None]

    return value, gradient


def _two_saddle_system():
    """Hand-tuned field with three minima and two merge saddles: the
    symmetric double well plus a localized dip inside well 1."""
    base = fl.saddle_energy_field(0.0)
    dip_v, dip_g = _gaussian_dip([0.55, 0.6, -0.58], 0.3, 0.02)
    G2 = fl.smooth_field(lambda x: base.value(x) + dip_v(x),
                         gradient=lambda x: base.gradient(x) + dip_g(x))
    F = fl.sphere_field()
    x0 = np.array([0.0, np.sqrt(3) / 2, -0.5])
    return fl.SurfaceSystem(F=F, G=G2, perturbation=fl.gradient_field(G2), z=0.5,
                            x0=x0, epsilon=1e-3, meta={"family": "two-saddle"})


def test_reeb_graph_two_saddles():
    sys2 = _two_saddle_system()
    crit = lv.find_critical_points(sys2, n_starts=500, seed=3)
    counts = {k: sum(c.kind == k for c in crit) for k in ("min", "saddle", "max")}
    assert counts["min"] == 3 and counts["saddle"] == 2
    graph = lv.build_reeb_graph(sys2, critical_points=crit)
    saddle_vertices = [v for v in graph.vertices.values() if v.kind == "saddle"]
    assert len(saddle_vertices) == 2
    assert len(graph.edges) == len(graph.vertices) - 1
    wells = graph.well_edges
    assert len(wells) == 3


def test_classify_point(sym_ctx):
    sys_, graph = sym_ctx.sys, sym_ctx.graph
    assert lv.classify_point(sys_, graph, sys_.x0) == (2, 0.5)
    k, g = lv.classify_point(sys_, graph, np.array([np.sqrt(3) / 2, 0.0, -0.5]))
    assert k == 1 and abs(g + 0.25) < 1e-12
    # mirrored points classify to edges 1 and 3 at the same level
    p = lv.point_at_level(sys_, lv._well_anchor(sys_, graph.edge(1).minimum), -0.1)
    k1, g1 = lv.classify_point(sys_, graph, p)
    k3, g3 = lv.classify_point(sys_, graph, p * MIRROR)
    assert (k1, k3) == (1, 3) and abs(g1 - g3) < 1e-12


def test_classify_separatrix_margin(sym_ctx):
    p = sym_ctx.graph.seed(2, 1e-8)
    with pytest.raises(SeparatrixAmbiguityError):
        lv.classify_point(sym_ctx.sys, sym_ctx.graph, p)


def test_classify_matches_tracing(sym_ctx):
    # every sample of a traced curve classifies to the same coordinates
    c = lv.trace_level_curve(sym_ctx.sys, -0.12, sym_ctx.graph.seed(3, -0.12))
    ks = {lv.classify_point(sym_ctx.sys, sym_ctx.graph, p)[0]
          for p in c.points[:: max(1, len(c.points) // 25)]}
    assert ks == {3}


def test_classify_general_descent_path(sym_ctx):
    # force the generic classifier (ignore the canonical fast path)
    sys_g = sym_ctx.sys.with_params(meta={"family": "generic"})
    k, g = lv.classify_point(sys_g, sym_ctx.graph, sym_ctx.sys.x0)
    assert (k, round(g, 12)) == (2, 0.5)


def test_rho_metric(sym_ctx):
    graph = sym_ctx.graph
    assert abs(graph.rho((2, 0.5), (2, 0.2)) - 0.3) < 1e-12
    assert abs(graph.rho((2, 0.5), (1, -0.2)) - 0.7) < 1e-12
    assert abs(graph.rho((1, -0.2), (3, -0.1)) - 0.3) < 1e-12


def test_edge_seed_range_error(sym_ctx):
    with pytest.raises(EdgeRangeError):
        sym_ctx.graph.seed(1, 0.7)


def test_non_generic_saddles_refused():
    # two exact mirror dips produce two saddles at the same level
    base = fl.saddle_energy_field(0.0)
    c1 = np.array([0.55, 0.6, -0.58])
    d1v, d1g = _gaussian_dip(c1, 0.3, 0.02)
    d2v, d2g = _gaussian_dip(c1 * MIRROR, 0.3, 0.02)
    G2 = fl.smooth_field(lambda x: base.value(x) + d1v(x) + d2v(x),
                         gradient=lambda x: base.gradient(x) + d1g(x) + d2g(x))
    sys2 = fl.SurfaceSystem(F=fl.sphere_field(), G=G2,
                            perturbation=fl.gradient_field(G2), z=0.5,
                            x0=np.array([0.0, np.sqrt(3) / 2, -0.5]), epsilon=1e-3)
    with pytest.raises(NonGenericLevelsError):
        lv.build_reeb_graph(sys2, n_starts=500, seed=3)


def test_condition_report(sym_ctx):
    rep = lv.condition_report(sym_ctx.sys, sym_ctx.graph, n_levels=3)
    assert set(rep["edges"]) == {1, 2, 3}
    assert all(v["min_speed"] > 0 for v in rep["edges"].values())
    assert all(c["eig_gap"] > 1e-3 for c in rep["critical_points"])


def test_export_csv(tmp_path, sym_ctx):
    rows = []
    for g in (0.2, 0.5):
        c = lv.trace_level_curve(sym_ctx.sys, g, sym_ctx.graph.seed(2, g))
        rows.append({"edge": 2, "g": g, "T": c.period})
    path = tmp_path / "curves.csv"
    lv.export_curves_csv(path, rows)
    text = path.read_text().splitlines()
    assert text[0] == "edge,g,T"
    assert len(text) == 3
