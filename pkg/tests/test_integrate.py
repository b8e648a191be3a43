"""Surface-constrained integration: conservation, order, noise laws, sampling."""

import numpy as np
import pytest
from scipy.stats import chi2 as chi2_dist

from slowfast import fields as fl
from slowfast import integrate as it
from slowfast import levelsets as lv


def _orbit_seed(ctx, g=0.5):
    return ctx.graph.seed(2, g)


def test_stationary_at_critical_point(sym_ctx):
    saddle = sym_ctx.graph.saddles[0]
    cfg = it.IntegratorConfig(h=1e-3)
    tr = it.integrate_unperturbed(sym_ctx.sys, saddle.x, 0.5, cfg)
    assert np.max(np.linalg.norm(tr.x - saddle.x, axis=-1)) < 1e-12


def test_closed_orbit_and_conservation(sym_ctx):
    seed = _orbit_seed(sym_ctx)
    curve = lv.trace_level_curve(sym_ctx.sys, 0.5, seed)
    T = curve.period
    cfg = it.IntegratorConfig(h=T / 4000)
    tr = it.integrate_unperturbed(sym_ctx.sys, seed, T, cfg)
    assert np.linalg.norm(tr.x[-1] - seed) < 1e-5
    assert np.max(np.abs(tr.g - 0.5)) < 1e-7
    assert np.max(np.abs(sym_ctx.sys.F.value(tr.x) - 0.5)) < 1e-9


def test_time_reversal(sym_ctx):
    seed = _orbit_seed(sym_ctx)
    cfg = it.IntegratorConfig(h=2e-4)
    fwd = it.integrate_unperturbed(sym_ctx.sys, seed, 1.0, cfg)
    # reversed drive: swap the roles in the cross product via G -> -G
    neg_G = fl.smooth_field(lambda x: -sym_ctx.sys.G.value(x),
                            gradient=lambda x: -sym_ctx.sys.G.gradient(x),
                            hessian=lambda x: -sym_ctx.sys.G.hessian(x))
    sys_rev = sym_ctx.sys.with_params(G=neg_G, perturbation=fl.gradient_field(neg_G))
    back = it.integrate_unperturbed(sys_rev, fwd.x[-1], 1.0, cfg)
    assert np.linalg.norm(back.x[-1] - seed) < 1e-6


def test_rk4_order_on_one_period(sym_ctx):
    seed = _orbit_seed(sym_ctx)
    curve = lv.trace_level_curve(sym_ctx.sys, 0.5, seed)
    T = curve.period
    finals = {}
    for n in (250, 500, 1000, 4000):
        cfg = it.IntegratorConfig(h=T / n, record_every=10**9)
        finals[n] = it.integrate_unperturbed(sym_ctx.sys, seed, T, cfg).x[-1]
    e1 = np.linalg.norm(finals[250] - finals[4000])
    e2 = np.linalg.norm(finals[500] - finals[4000])
    e3 = np.linalg.norm(finals[1000] - finals[4000])
    for ratio in (e1 / e2, e2 / e3):
        assert 8.0 < ratio < 32.0


def test_slow_flow_friction_monotone(sym_ctx):
    cfg = it.IntegratorConfig(h=7e-5, record_every=20)
    tr = it.integrate_slow(sym_ctx.sys, sym_ctx.sys.x0, 1.5, cfg)
    # outside small neighborhoods of the critical points the energy decreases
    dg = np.diff(tr.g)
    assert np.all(dg <= 1e-9)
    assert np.max(np.abs(sym_ctx.sys.F.value(tr.x) - 0.5)) < 1e-9


def test_slow_flow_well_event(sym_ctx):
    classify = sym_ctx.side_classifier()
    tracker = it.WellEventTracker(saddle_g=0.0, boundary_g=1.5,
                                  classify=lambda x: int(classify(x[None])[0]))
    cfg = it.IntegratorConfig(h=7e-5, record_every=50)
    tr = it.integrate_slow(sym_ctx.sys, sym_ctx.sys.x0, 2.0, cfg, tracker=tracker)
    names = [name for _, name in tr.events]
    assert any(n.startswith("entered-well-") for n in names)
    # converges toward a well bottom
    assert tr.g[-1] < -0.2


def test_step_resolution_guard(sym_ctx):
    cfg = it.IntegratorConfig(h=1e-2, min_fast_period=3.6)
    with pytest.raises(it.StepResolutionError):
        it.integrate_slow(sym_ctx.sys, sym_ctx.sys.x0, 0.1, cfg)


def test_sde_delta_zero_bitwise(sym_ctx):
    sys_ = sym_ctx.sys.with_params(epsilon=1e-2, delta=0.0)
    cfg = it.IntegratorConfig(h=1e-4, method="heun-stratonovich", record_every=20)
    a = it.integrate_slow(sys_, sys_.x0, 0.05, cfg)
    b = it.integrate_sde(sys_, sys_.x0, 0.05, cfg, delta=0.0)
    assert np.array_equal(a.x, b.x)


def test_sde_conserves_surface_and_reproduces(sym_ctx):
    sys_ = sym_ctx.sys.with_params(epsilon=1e-2, delta=0.3)
    cfg = it.IntegratorConfig(h=1e-5, method="heun-stratonovich", tol_f=1e-9,
                              seed=42, record_every=100)
    tr1 = it.integrate_sde(sys_, sys_.x0, 0.3, cfg)
    tr2 = it.integrate_sde(sys_, sys_.x0, 0.3, cfg)
    assert np.array_equal(tr1.x, tr2.x)
    assert np.max(np.abs(sys_.F.value(tr1.x) - 0.5)) < 1e-6


def test_unprojected_defect_order():
    # one Heun step leaves an O(h^{3/2}) defect in F before projection
    sys_ = fl.canonical_sphere_system(epsilon=1e-2, delta=0.3)
    rng = it.trajectory_rng(0, 0)
    defects = []
    for h in (1e-4, 4e-4):
        x = np.tile(sys_.x0, (4000, 1))
        dw = np.sqrt(h) * rng.standard_normal((4000, 3))
        drift = it._make_drift(sys_, "slow")
        xn = it.heun_step(drift, x, h, noise=sys_.noise, delta=0.3, dw=dw)
        defects.append(np.mean(np.abs(sys_.F.value(xn) - 0.5)))
    order = np.log(defects[1] / defects[0]) / np.log(4.0)
    assert order > 1.2  # at least h^{1.2}; the drift part pushes toward h^2


def _pure_noise_system(delta=0.5):
    const = fl.smooth_field(lambda x: np.zeros(np.asarray(x, float).shape[:-1]),
                            gradient=lambda x: np.zeros(np.asarray(x, float).shape),
                            hessian=lambda x: np.zeros(np.asarray(x, float).shape[:-1] + (3, 3)))
    F = fl.sphere_field()
    return fl.SurfaceSystem(F=F, G=const, perturbation=fl.gradient_field(const),
                            z=0.5, x0=np.array([0.0, 0.0, 1.0]), epsilon=1.0,
                            delta=delta, noise=fl.tangent_projection_noise(F),
                            meta={"family": "pure-noise-sphere"})


def test_pure_noise_matches_sphere_brownian_drift():
    # Ito drift of the Stratonovich tangent noise on the unit sphere: -delta^2 x
    sys_ = _pure_noise_system(0.5)
    n, h = 200000, 1e-4
    cfg = it.IntegratorConfig(h=h, method="heun-stratonovich", seed=7)
    X0 = np.tile(sys_.x0, (n, 1))
    xf, _, _ = it.run_batch(sys_, X0, h, cfg, mode="sde")
    drift = (xf - X0).mean(axis=0) / h
    se = (xf - X0).std(axis=0) / h / np.sqrt(n)
    expect = -0.25 * sys_.x0
    assert np.all(np.abs(drift - expect) < 3.5 * np.maximum(se, 1e-6))


def test_pure_noise_invariant_density_uniform():
    # equal-area partition of the sphere: chi-square for uniformity
    sys_ = _pure_noise_system(1.0)
    cfg = it.IntegratorConfig(h=2e-3, method="heun-stratonovich", seed=11, tol_f=1e-9)
    n_chains = 64
    rng = np.random.default_rng(1)
    v = rng.standard_normal((n_chains, 3))
    X0 = v / np.linalg.norm(v, axis=-1, keepdims=True)
    samples = []

    # decorrelate: the mixing time at delta=1 is about one time unit, so
    # sample once per unit after a burn-in
    def monitor(step, t, x, active):
        if step % 500 == 0 and step > 1000:
            samples.append(x.copy())
        return None

    it.run_batch(sys_, X0, 60.0, cfg, mode="sde", monitor=monitor)
    pts = np.concatenate(samples)
    # equal-area cells: uniform in z and azimuth
    zi = np.clip(((pts[:, 2] + 1) / 2 * 6).astype(int), 0, 5)
    ai = np.clip(((np.arctan2(pts[:, 1], pts[:, 0]) + np.pi) / (2 * np.pi) * 6).astype(int), 0, 5)
    counts = np.bincount(zi * 6 + ai, minlength=36)
    expected = counts.sum() / 36.0
    stat = np.sum((counts - expected) ** 2 / expected)
    p = chi2_dist.sf(stat, 35)
    assert p > 0.01


def test_uniform_cap_sampler(sym_ctx):
    sys_ = sym_ctx.sys
    rng = np.random.default_rng(5)
    center = sys_.x0
    radius = 0.2
    pts = np.array([it.sample_uniform_neighborhood(sys_, center, radius, rng)
                    for _ in range(10000)])
    assert np.max(np.abs(sys_.F.value(pts) - 0.5)) < 1e-10
    d = it.surface_distance(sys_, pts, center)
    assert np.max(d) < radius
    # oracle: surface average of G over the geodesic cap by 2-D quadrature
    n = center / np.linalg.norm(center)
    a = np.array([1.0, 0.0, 0.0])
    e1 = a - np.dot(a, n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    psi = np.linspace(0, radius, 400)[None, :]
    az = np.linspace(0, 2 * np.pi, 400, endpoint=False)[:, None]
    cap = (np.cos(psi)[..., None] * n + np.sin(psi)[..., None]
           * (np.cos(az)[..., None] * e1 + np.sin(az)[..., None] * e2))
    w = np.sin(psi)
    mean_oracle = np.sum(sys_.G.value(cap) * w) / np.sum(w * np.ones_like(az))
    est = np.mean(sys_.G.value(pts))
    se = np.std(sys_.G.value(pts)) / np.sqrt(len(pts))
    assert abs(est - mean_oracle) < 3 * se


def test_cap_sampler_degenerate_radius(sym_ctx):
    rng = np.random.default_rng(6)
    p = it.sample_uniform_neighborhood(sym_ctx.sys, sym_ctx.sys.x0, 1e-5, rng)
    assert np.linalg.norm(p - sym_ctx.sys.x0) < 1e-4


def test_trajectory_records(tmp_path, sym_ctx):
    cfg = it.IntegratorConfig(h=1e-3, record_every=5)
    tr = it.integrate_unperturbed(sym_ctx.sys, sym_ctx.graph.seed(2, 0.5), 0.05, cfg)
    path = tmp_path / "records.jsonl"
    tr.write_records(path, downsample=2)
    import json
    lines = [json.loads(line) for line in open(path)]
    assert len(lines) == (len(tr.t) + 1) // 2
    assert set(lines[0]) == {"t", "x", "g", "event"}
