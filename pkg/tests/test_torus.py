"""Genus-one surface: winding flow, wells, rates, limit process, SDE link."""

import dataclasses

import numpy as np
import pytest
from scipy.stats import kstest

from slowfast import torus as tor
from slowfast.fields import explicit_field
from slowfast.errors import VanishingRateError


def test_surface_field_derivatives(torus_ctx):
    tsys, _ = torus_ctx
    rng = np.random.default_rng(0)
    th = rng.uniform(-np.pi, np.pi, 300)
    ph = rng.uniform(-np.pi, np.pi, 300)
    pts = tsys.embed(th, ph)
    assert np.max(np.abs(tsys.F.value(pts) - tsys.z)) < 1e-12
    # |grad F| = 2 sqrt(z) on the surface for this family
    assert np.max(np.abs(np.linalg.norm(tsys.F.gradient(pts), axis=-1)
                         - 2 * tsys.r)) < 1e-12
    step = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        fd = (tsys.F.value(pts + e) - tsys.F.value(pts - e)) / (2 * step)
        assert np.max(np.abs(fd - tsys.F.gradient(pts)[..., k])) < 1e-8


def test_drive_is_curl_free_on_surface(torus_ctx):
    tsys, _ = torus_ctx
    rng = np.random.default_rng(1)
    pts = tsys.embed(rng.uniform(-np.pi, np.pi, 200), rng.uniform(-np.pi, np.pi, 200))
    J = tsys.d.jacobian(pts)
    curl = np.stack([J[..., 2, 1] - J[..., 1, 2],
                     J[..., 0, 2] - J[..., 2, 0],
                     J[..., 1, 0] - J[..., 0, 1]], axis=-1)
    assert np.max(np.abs(curl)) < 1e-8


def test_angle_form_of_flow(torus_ctx):
    tsys, _ = torus_ctx
    rng = np.random.default_rng(2)
    th = rng.uniform(-np.pi, np.pi, 100)
    ph = rng.uniform(-np.pi, np.pi, 100)
    pts = tsys.embed(th, ph)
    v3 = np.cross(tsys.F.gradient(pts), tsys.d.func(pts))
    td, pd = tor._flow_angle_rhs(tsys, th, ph)
    rho = tsys.R + tsys.r * np.cos(ph)
    e_th = np.stack([-rho * np.sin(th), rho * np.cos(th), np.zeros_like(th)], -1)
    e_ph = np.stack([-tsys.r * np.sin(ph) * np.cos(th),
                     -tsys.r * np.sin(ph) * np.sin(th), tsys.r * np.cos(ph)], -1)
    assert np.max(np.linalg.norm(v3 - e_th * td[..., None] - e_ph * pd[..., None],
                                 axis=-1)) < 1e-12


def test_wells_are_rest_points_and_invariant(torus_ctx):
    tsys, _ = torus_ctx
    assert len(tsys.wells) == 2
    kinds = sorted(w.center_is_max for w in tsys.wells)
    assert kinds == [False, True]
    for w in tsys.wells:
        for x in (w.center_x, w.saddle_x):
            v = np.cross(tsys.F.gradient(x), tsys.d.func(x))
            assert np.linalg.norm(v) < 1e-10
    # the conservative flow conserves the local Hamiltonian inside a well
    w = tsys.wells[0]
    from slowfast.levelsets import point_at_level
    lvl = w.H_saddle + 0.3 * w.h_center
    x0 = point_at_level(tsys, tor._center_offset(tsys, w), lvl, second=w.H)
    _, _, _, samples = tor.run_torus_batch(tsys, x0[None], 40.0, 5e-3,
                                           mode="fast", sample_every=20)
    pts = np.concatenate(samples)
    assert np.max(np.abs(w.H.value(pts) - lvl)) < 1e-7
    th, ph = tsys.angles(pts)
    assert np.all(w.contains_angles(th, ph))


def test_ergodic_class_untouched_by_conservative_flow(torus_ctx):
    tsys, _ = torus_ctx
    _, _, _, samples = tor.run_torus_batch(tsys, tsys.x0[None], 200.0, 5e-3,
                                           mode="fast", sample_every=40)
    pts = np.concatenate(samples)
    assert not np.any(tsys.in_any_well(pts))


def test_invariant_measure_chi2(torus_ctx):
    tsys, _ = torus_ctx
    chk = tor.invariant_measure_check(tsys, t_end=400.0, bins=10, h=5e-3,
                                      n_chains=48, subsample=400, seed=3)
    assert chk.p_value > 0.01
    assert chk.n_cells > 50


def test_rescaled_flow_uniform_occupation(torus_ctx):
    tsys, _ = torus_ctx
    chk = tor.invariant_measure_check(tsys, t_end=300.0, bins=10, h=5e-3,
                                      n_chains=48, subsample=400, seed=4,
                                      rescaled=True)
    assert chk.p_value > 0.01


def test_nonergodic_flow_flagged_by_chi2(torus_ctx):
    # drop the minor-angle period: every orbit outside the wells closes, the
    # occupation histogram is singular and the test rejects
    tsys = tor.canonical_torus_system(gamma=0.0)
    chk = tor.invariant_measure_check(tsys, t_end=200.0, bins=8, h=5e-3,
                                      n_chains=24, subsample=300, seed=5)
    assert chk.p_value < 1e-4


def test_s_rule_table():
    assert tor.s_rule(+1, True) == 1
    assert tor.s_rule(-1, False) == 1
    assert tor.s_rule(+1, False) == 0
    assert tor.s_rule(-1, True) == 0


def test_rates_and_circulation_oracle(torus_ctx):
    tsys, rg = torus_ctx
    assert rg.lambda_erg > 0
    a_vec = np.asarray(tsys.meta["p_axis"])
    from slowfast.levelsets import trace_level_curve, point_at_level
    for k, e in rg.edges.items():
        assert e.s == 1
        w = next(w for w in tsys.wells if w.index == k)
        lvl = w.H_saddle + 1e-3 * w.h_center
        seed = point_at_level(tsys, tor._center_offset(tsys, w), lvl, second=w.H)
        c = trace_level_curve(tsys, lvl, seed, second=w.H)
        mid = 0.5 * (c.points[1:] + c.points[:-1])
        dl = np.diff(c.points, axis=0)
        circ = np.sum(np.cross(a_vec, mid) * dl)
        # boundary circulation of the rotation pump equals the curl flux
        assert abs(-2.0 * circ - e.psi_bar) / abs(e.psi_bar) < 0.01
    # the configured pump feeds the wells at distinct rates
    rates = sorted(e.rate for e in rg.edges.values())
    assert rates[1] / rates[0] > 1.5


def test_beta_internal_consistency(torus_ctx):
    # sum(beta_k * lambda) must reproduce the stored boundary loop integrals
    tsys, rg = torus_ctx
    for k, e in rg.edges.items():
        b_loop = e.beta * rg.lambda_erg
        # compare with the tabulated diffusion numerator near the boundary
        assert abs(b_loop - e.b[np.argmin(np.abs(e.h_grid))]) / b_loop < 0.08


def test_rate_scaling_in_pump(torus_ctx):
    tsys, rg = torus_ctx
    scaled = tor.canonical_torus_system(p_axis=tuple(2.0 * np.asarray(tsys.meta["p_axis"])))
    rg2 = tor.torus_rates(scaled, lambda_erg=rg.lambda_erg)
    for k in rg.edges:
        assert abs(rg2.edges[k].psi_bar - 2 * rg.edges[k].psi_bar) \
            / abs(rg2.edges[k].psi_bar) < 1e-6
        assert rg2.edges[k].s == rg.edges[k].s
    p1 = rg.entry_probabilities()
    p2 = rg2.entry_probabilities()
    for k in p1:
        assert abs(p1[k] - p2[k]) < 1e-9


def test_vanishing_pump_rejected(torus_ctx):
    tsys, _ = torus_ctx
    zero_p = explicit_field(lambda x: np.zeros(np.asarray(x, float).shape))
    with pytest.raises(VanishingRateError):
        tor.torus_rates(dataclasses.replace(tsys, p=zero_p))


def test_limit_process_holding_law(torus_ctx):
    _, rg = torus_ctx
    rng = np.random.default_rng(0)
    taus, enters = [], []
    for _ in range(5000):
        gp = tor.simulate_torus_limit(rg, (0, 0.0), 200.0, rng)
        if gp.branching_log:
            t, _, k = gp.branching_log[0]
            taus.append(t)
            enters.append(k)
    taus = np.array(taus)
    stat = kstest(taus, "expon", args=(0, 1.0 / rg.total_rate))
    assert stat.pvalue > 0.01
    probs = rg.entry_probabilities()
    for k, pk in probs.items():
        frac = np.mean(np.array(enters) == k)
        se = np.sqrt(pk * (1 - pk) / len(enters))
        assert abs(frac - pk) < 3 * se


def test_limit_process_all_blocked_holds_forever():
    # s_k = 0 for every well: the process must sit at the root to the horizon
    edges = {1: tor.TorusEdge(well_index=1, h_grid=np.array([0.01, 0.1, 0.2]),
                              T=np.ones(3), a=np.ones(3), a1=np.zeros(3),
                              a2=np.zeros(3), b=np.ones(3), psi_bar=2.0,
                              beta=0.1, s=0, rate=0.0, h_center=0.2,
                              center_is_max=True)}
    rg0 = tor.RootedGraph(lambda_erg=5.0, edges=edges)
    rng = np.random.default_rng(1)
    gp = tor.simulate_torus_limit(rg0, (0, 0.0), 50.0, rng)
    assert not gp.branching_log
    assert np.all(gp.edges == 0)
    assert gp.times[-1] == 50.0


def test_limit_process_excursions_deterministic(torus_ctx):
    _, rg = torus_ctx
    k = list(rg.edges)[0]
    e = rg.edges[k]
    h_abs, prof_t = tor._edge_entry_profile(e)
    target = 0.35 * abs(e.h_center)
    leg = float(np.interp(target, h_abs, prof_t))
    # two separate entries into the same edge reach the depth simultaneously
    rng = np.random.default_rng(2)
    legs = []
    for _ in range(40):
        gp = tor.simulate_torus_limit(rg, (0, 0.0), 400.0, rng)
        if gp.branching_log and gp.branching_log[0][2] == k:
            t0 = gp.branching_log[0][0]
            sel = (gp.times >= t0) & (np.abs(gp.gs) >= target) & (gp.edges == k)
            if np.any(sel):
                legs.append(gp.times[np.argmax(sel)] - t0)
    assert len(legs) >= 2
    assert np.max(np.abs(np.array(legs) - leg)) < 0.05 * leg


def test_repelled_well_returns_to_root():
    # manual edge with s = 0: a walker started inside drifts back in the
    # deterministic time integral of 1/|Bbar|
    h_grid = np.linspace(0.002, 0.2, 30)
    T = np.full(30, 2.0)
    a = np.full(30, -0.05)           # pushes h down toward the root
    edges = {1: tor.TorusEdge(well_index=1, h_grid=h_grid, T=T, a=a,
                              a1=np.zeros(30), a2=np.zeros(30), b=np.ones(30),
                              psi_bar=-0.1, beta=0.1, s=0, rate=0.0,
                              h_center=0.2, center_is_max=True)}
    rg0 = tor.RootedGraph(lambda_erg=5.0, edges=edges)
    rng = np.random.default_rng(3)
    gp = tor.simulate_torus_limit(rg0, (1, 0.15), 100.0, rng)
    back = [t for t, name, _ in gp.branching_log if name.startswith("return")]
    assert back
    # time to drain from 0.15 at speed |a|/T = 0.025
    assert abs(back[0] - 0.15 / 0.025) / (0.15 / 0.025) < 0.05


def test_sde_projection_output(torus_ctx):
    tsys, _ = torus_ctx
    traj, gp = tor.simulate_torus_sde(tsys, tsys.x0, 0.5, h=2e-4, master_seed=5)
    assert np.max(np.abs(tsys.F.value(traj.x) - tsys.z)) < 1e-6
    assert len(gp.times) == len(traj.t)
    assert set(np.unique(gp.edges)) <= {0, 1, 2}
