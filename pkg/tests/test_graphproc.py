"""Limit process and graph diffusion: vertex law, tips, first passages."""

import numpy as np
import pytest

from slowfast import averaging as av
from slowfast import graphproc as gp
from slowfast.errors import SlowfastError


def test_limit_process_matches_slow_ode(sym_ctx):
    rng = np.random.default_rng(0)
    path = gp.simulate_limit_process(sym_ctx.sys, sym_ctx.graph, sym_ctx.saddle,
                                     (2, 0.5), 5.0, rng)
    assert path.branching_log
    t_branch, label, chosen = path.branching_log[0]
    ode = av.solve_slow_ode(sym_ctx.sys, sym_ctx.graph, (2, 0.5), 5.0,
                            well_choice=chosen)
    tt = np.linspace(0, 4.5, 60)
    assert np.max(np.abs(path.state_of_t(0.3)[1] - ode.g_of_t(0.3))) < 1e-8
    assert np.max(np.abs([path.state_of_t(t)[1] - ode.g_of_t(t) for t in tt])) < 1e-8
    # zero time at the vertex: the time grid is strictly increasing through it
    i = np.searchsorted(path.times, t_branch)
    assert path.times[min(i + 1, len(path.times) - 1)] > t_branch - 1e-12


def test_limit_process_branch_fractions(sym_ctx):
    rng = np.random.default_rng(1)
    n = 4000
    count = 0
    for _ in range(n):
        # only the branch decision consumes randomness; resample it cheaply
        count += rng.random() < sym_ctx.saddle.p1
    se = np.sqrt(0.25 / n)
    assert abs(count / n - sym_ctx.saddle.p1) < 3 * se


def test_graph_diffusion_path_and_ranges(sym_ctx):
    path = gp.simulate_graph_diffusion(sym_ctx.coeffs, sym_ctx.saddle, 0.3,
                                       (2, 0.5), 20.0, rng_seed=3)
    for k in np.unique(path.edges):
        t = sym_ctx.coeffs.table(int(k))
        sel = path.edges == k
        assert np.all(path.gs[sel] >= t.g_lo - 1e-9)
        assert np.all(path.gs[sel] <= t.g_hi + 1e-9)
    assert np.all(np.diff(path.times) >= 0)


def test_vertex_exit_frequencies_and_h_independence(sym_ctx):
    q = sym_ctx.saddle.q
    for h in (1e-2, 5e-3, 2.5e-3):
        freqs, n = gp.collect_vertex_exits(sym_ctx.coeffs, sym_ctx.saddle, 0.3,
                                           4000, master_seed=5, h_vertex=h)
        assert n >= 4000
        for k, qk in q.items():
            se = np.sqrt(qk * (1 - qk) / n)
            assert abs(freqs[k] - qk) < 3.5 * se


def test_exit_bvp_oracle_pure_noise():
    # constant diffusion, no drift: exit weights are the beta ratios
    betas = {1: 2.0, 2: 5.0, 3: 3.0}
    mu = {k: (lambda r: np.zeros_like(r)) for k in betas}
    s2 = {k: (lambda r: np.ones_like(r)) for k in betas}
    out = gp.exit_probabilities_bvp(betas, mu, s2, h=0.05)
    total = sum(betas.values())
    for k in betas:
        assert abs(out[k] - betas[k] / total) < 1e-9


def test_exit_bvp_oracle_with_drift():
    # outward drift on leg 1 raises its exit weight relative to pure noise,
    # inward drift suppresses it
    betas = {1: 1.0, 2: 1.0}
    s2 = {k: (lambda r: np.ones_like(r)) for k in betas}
    out = gp.exit_probabilities_bvp(
        betas, {1: (lambda r: 3.0 * np.ones_like(r)),
                2: (lambda r: np.zeros_like(r))}, s2, h=0.3)
    assert out[1] > 0.6
    inward = gp.exit_probabilities_bvp(
        betas, {1: (lambda r: -3.0 * np.ones_like(r)),
                2: (lambda r: np.zeros_like(r))}, s2, h=0.3)
    assert inward[1] < 0.4
    assert abs(out[1] + out[2] - 1.0) < 1e-12


def test_probability_conservation_in_passages(sym_ctx):
    eng = gp.GraphDiffusion(sym_ctx.coeffs, sym_ctx.saddle, 0.35)
    eng.run(2, 0.3, 40.0, master_seed=7, n_walkers=64)
    assert eng.n_passages > 0
    assert sum(eng.passage_exits.values()) == eng.n_passages


def test_tip_reflection_keeps_range(sym_ctx):
    eng = gp.GraphDiffusion(sym_ctx.coeffs, sym_ctx.saddle, 0.4,
                            absorb_at_boundary=False)
    t1 = sym_ctx.coeffs.table(1)
    out = eng.run(1, t1.g_lo + 0.01, 30.0, master_seed=11, n_walkers=32)
    assert np.all(out["g"] >= t1.g_lo - 1e-9)


def test_boundary_absorption_policy(sym_ctx):
    eng = gp.GraphDiffusion(sym_ctx.coeffs, sym_ctx.saddle, 0.5,
                            absorb_at_boundary=True)
    t2 = sym_ctx.coeffs.table(2)
    out = eng.run(2, t2.g_hi - 0.05, 200.0, master_seed=13, n_walkers=32)
    assert np.any(out["stopped_at_boundary"])


def test_transition_time_stats(sym_ctx):
    rows = gp.transition_time_stats(sym_ctx.coeffs, sym_ctx.saddle,
                                    (0.5, 0.4), 1, 200, master_seed=17,
                                    t_timeout=1e4)
    assert rows[0]["censored"] == 0
    assert rows[0]["mean"] < rows[1]["mean"]       # less noise escapes slower
    assert all(np.isfinite(r["d2_log_mean"]) for r in rows)


def test_transition_symmetric_wells(sym_ctx):
    rows1 = gp.transition_time_stats(sym_ctx.coeffs, sym_ctx.saddle, (0.4,), 1,
                                     400, master_seed=19)
    rows3 = gp.transition_time_stats(sym_ctx.coeffs, sym_ctx.saddle, (0.4,), 3,
                                     400, master_seed=19)
    m1, s1, n1 = rows1[0]["mean"], rows1[0]["std"], rows1[0]["n"]
    m3, s3, n3 = rows3[0]["mean"], rows3[0]["std"], rows3[0]["n"]
    # overlapping 95 percent confidence intervals
    assert abs(m1 - m3) < 2 * (s1 / np.sqrt(n1) + s3 / np.sqrt(n3))


def test_transition_requires_well_edge(sym_ctx):
    with pytest.raises(SlowfastError):
        gp.transition_time_stats(sym_ctx.coeffs, sym_ctx.saddle, (0.4,), 2, 10)
