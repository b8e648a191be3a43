"""Time integration constrained to the invariant surface {F = z}.

Three regimes share one stepping core:

  * the conservative flow  dx/dt = grad F x grad G            (fast time)
  * the slow-time drift    dx/dt = (1/eps) grad F x grad G + slow perturbation
  * the slow-time SDE      dx/dt = ... + delta * sigma o dW   (Stratonovich)

Every accepted step is followed by Newton projection back onto {F=z}, which
keeps the first integral exact to tolerance instead of merely O(h^p).
Deterministic runs are pure functions of (start, config); stochastic runs
draw from a counter-based stream keyed by (master seed, trajectory index),
so results are reproducible independently of batching.

The batch entry points integrate many trajectories at once on (n,3) arrays;
the public single-trajectory functions wrap them with full sample recording.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import json
import numpy as np

from .errors import ProjectionError, RejectionOverflowError, StepResolutionError, SlowfastError
from .fields import SurfaceSystem, fast_field, slow_drift, project_to_surface, unit_normal

FAST_PERIOD_FRACTION = 1.0 / 50.0


@dataclass
class IntegratorConfig:
    h: float = 1e-3
    method: str = "rk4-projected"         # or "heun-stratonovich"
    tol_f: float = 1e-10
    max_projections: int = 60
    seed: int = 0
    record_every: int = 1
    min_fast_period: Optional[float] = None   # enforce h/eps <= fraction * period
    fast_step_fraction: float = FAST_PERIOD_FRACTION
    well_entry_margin: float = 1e-3           # how far below the saddle level counts as "in"
    noise_chunk: int = 256


@dataclass
class Trajectory:
    t: np.ndarray                  # (m,)
    x: np.ndarray                  # (m,3)
    g: np.ndarray                  # (m,)
    events: list = dc_field(default_factory=list)   # (t, name) pairs

    def write_records(self, path, downsample=1):
        """One JSON record per line: {"t":..,"x":[..],"g":..,"event":..}."""
        ev = {round(t, 12): name for t, name in self.events}
        with open(path, "w") as fh:
            for i in range(0, len(self.t), max(1, int(downsample))):
                rec = {"t": float(self.t[i]),
                       "x": [float(v) for v in self.x[i]],
                       "g": float(self.g[i]),
                       "event": ev.get(round(float(self.t[i]), 12))}
                fh.write(json.dumps(rec) + "\n")


def trajectory_rng(master_seed, index=0):
    """Counter-based per-trajectory stream: Philox keyed by (seed, index)."""
    key = np.array([np.uint64(master_seed & (2**64 - 1)), np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# stepping kernels (batched over leading axes)

def _project(sys, x, tol, max_iter):
    return project_to_surface(sys.F, sys.z, x, tol=tol, max_iter=max_iter)


def rk4_step(drift, x, h):
    k1 = drift(x)
    k2 = drift(x + 0.5 * h * k1)
    k3 = drift(x + 0.5 * h * k2)
    k4 = drift(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def heun_step(drift, x, h, noise=None, delta=0.0, dw=None):
    """Midpoint-predictor Heun step; converges to the Stratonovich solution."""
    f0 = drift(x)
    if delta != 0.0 and noise is not None:
        s0 = noise.matvec(x, dw)
        xp = x + h * f0 + delta * s0
        f1 = drift(xp)
        s1 = noise.matvec(xp, dw)
        return x + 0.5 * h * (f0 + f1) + 0.5 * delta * (s0 + s1)
    xp = x + h * f0
    f1 = drift(xp)
    return x + 0.5 * h * (f0 + f1)


def _cross(a, b):
    out = np.empty(np.broadcast(a, b).shape)
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def _make_drift(sys: SurfaceSystem, mode):
    gradF = sys.F.gradient
    gradG = sys.G.gradient
    if mode == "unperturbed":
        return lambda x: _cross(gradF(x), gradG(x))
    if mode != "slow":
        raise SlowfastError(f"unknown drift mode {mode!r}")
    inv_eps = 1.0 / sys.epsilon
    pert = sys.perturbation
    if sys.perturbation_form == "b":
        # damping via BAC-CAB: gF x (gF x b) = gF (gF.b) - b (gF.gF)
        if pert.kind == "gradient-of-field" and pert.potential is sys.G:
            def drift(x):
                gf = gradF(x)
                gg = gradG(x)
                fast = _cross(gf, gg)
                dot_fb = np.sum(gf * gg, axis=-1, keepdims=True)
                dot_ff = np.sum(gf * gf, axis=-1, keepdims=True)
                return inv_eps * fast + gf * dot_fb - gg * dot_ff
        else:
            def drift(x):
                gf = gradF(x)
                b = pert.func(x)
                fast = _cross(gf, gradG(x))
                dot_fb = np.sum(gf * b, axis=-1, keepdims=True)
                dot_ff = np.sum(gf * gf, axis=-1, keepdims=True)
                return inv_eps * fast + gf * dot_fb - b * dot_ff
    else:
        def drift(x):
            gf = gradF(x)
            return inv_eps * _cross(gf, gradG(x)) + _cross(gf, pert.func(x))
    return drift


class NoiseStream:
    """Per-trajectory Gaussian increments drawn in chunks.

    Each trajectory owns a Philox stream keyed by (master seed, trajectory
    index), so the increments do not depend on how runs are batched.
    """

    def __init__(self, master_seed, n_traj, chunk=256, indices=None):
        self.chunk = int(chunk)
        idx = range(n_traj) if indices is None else indices
        self._rngs = [trajectory_rng(master_seed, i) for i in idx]
        self._buf = None
        self._pos = 0

    def next(self, sqrt_h):
        if self._buf is None or self._pos >= self.chunk:
            self._buf = np.stack([r.standard_normal((self.chunk, 3)) for r in self._rngs], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return sqrt_h * out


def run_batch(sys, x0, t_end, cfg, mode="slow", monitor=None, master_seed=None,
              delta=None, traj_indices=None):
    """Fixed-step batch driver.

    ``monitor(step, t, x, active)`` may deactivate trajectories by returning
    an updated boolean mask (or None to keep all).  Returns final states,
    final times and the active mask.
    """
    x = np.atleast_2d(np.array(x0, dtype=float)).copy()
    x = _project(sys, x, cfg.tol_f, cfg.max_projections)
    n = x.shape[0]
    h = cfg.h
    n_steps = int(np.ceil(t_end / h))
    active = np.ones(n, dtype=bool)
    t_final = np.full(n, n_steps * h)
    drift = _make_drift(sys, "unperturbed" if mode == "unperturbed" else "slow")
    stream = None
    if mode == "sde":
        if sys.noise is None:
            raise SlowfastError("sde mode requires a noise map")
        seed = cfg.seed if master_seed is None else master_seed
        stream = NoiseStream(seed, n, cfg.noise_chunk, indices=traj_indices)
        dlt = sys.delta if delta is None else delta
        sqrt_h = np.sqrt(h)
    for step in range(n_steps):
        t = (step + 1) * h
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        if mode == "sde":
            dw = stream.next(sqrt_h)          # drawn for all trajectories to keep streams aligned
            xn = heun_step(drift, x[idx], h, noise=sys.noise, delta=dlt, dw=dw[idx])
        elif cfg.method == "heun-stratonovich":
            xn = heun_step(drift, x[idx], h)
        else:
            xn = rk4_step(drift, x[idx], h)
        x[idx] = _project(sys, xn, cfg.tol_f, cfg.max_projections)
        if monitor is not None:
            new_active = monitor(step, t, x, active)
            if new_active is not None:
                newly_stopped = active & ~new_active
                t_final[newly_stopped] = t
                active = new_active
    return x, t_final, active


# ---------------------------------------------------------------------------
# single-trajectory public operations

class WellEventTracker:
    """Logs first entry into either well and arrival at the outer boundary.

    ``saddle_g``/``boundary_g`` come from the level-set analysis; ``classify``
    maps points with g below the saddle to a well edge id.
    """

    def __init__(self, saddle_g, boundary_g, classify, margin=1e-3):
        self.saddle_g = saddle_g
        self.boundary_g = boundary_g
        self.classify = classify
        self.margin = margin
        self.well_entered = None
        self.events = []

    def check(self, t, x, g):
        if self.well_entered is None and g < self.saddle_g - self.margin:
            k = self.classify(x)
            self.well_entered = k
            self.events.append((t, f"entered-well-{k}"))
        if g >= self.boundary_g:
            self.events.append((t, "hit-boundary-P"))
            return True
        return False


def _record_run(sys, x_start, t_end, cfg, mode, rng_seed=None, tracker=None, delta=None):
    x = np.asarray(x_start, dtype=float).reshape(1, 3).copy()
    x = _project(sys, x, cfg.tol_f, cfg.max_projections)
    h = cfg.h
    n_steps = int(np.ceil(t_end / h))
    rec = max(1, int(cfg.record_every))
    ts = [0.0]
    xs = [x[0].copy()]
    gs = [float(sys.G.value(x[0]))]
    stream = None
    if mode == "sde":
        stream = NoiseStream(cfg.seed if rng_seed is None else rng_seed, 1, cfg.noise_chunk)
        dlt = sys.delta if delta is None else delta
        sqrt_h = np.sqrt(h)
    drift = _make_drift(sys, "unperturbed" if mode == "unperturbed" else "slow")
    events = []
    for step in range(n_steps):
        t = (step + 1) * h
        if mode == "sde":
            dw = stream.next(sqrt_h)
            xn = heun_step(drift, x, h, noise=sys.noise, delta=dlt, dw=dw)
        elif cfg.method == "heun-stratonovich":
            xn = heun_step(drift, x, h)
        else:
            xn = rk4_step(drift, x, h)
        x = _project(sys, xn, cfg.tol_f, cfg.max_projections)
        g = float(sys.G.value(x[0]))
        if (step + 1) % rec == 0 or step == n_steps - 1:
            ts.append(t)
            xs.append(x[0].copy())
            gs.append(g)
        if tracker is not None and tracker.check(t, x[0], g):
            events = list(tracker.events)
            events.append((t, "stopped"))
            break
    if tracker is not None and not events:
        events = list(tracker.events)
    return Trajectory(t=np.array(ts), x=np.array(xs), g=np.array(gs), events=events)


def integrate_unperturbed(sys, x_start, t_end, cfg=None):
    """Conservative flow in fast time; both F and G are conserved."""
    cfg = cfg or IntegratorConfig(h=1e-3)
    return _record_run(sys, x_start, t_end, cfg, mode="unperturbed")


def integrate_slow(sys, x_start, t_end_slow, cfg=None, tracker=None):
    """Slow-time deterministic flow (1/eps) grad F x grad G + damping drift."""
    cfg = cfg or IntegratorConfig(h=min(1e-4, sys.epsilon * 0.1))
    if cfg.min_fast_period is not None and cfg.h / sys.epsilon > cfg.fast_step_fraction * cfg.min_fast_period:
        raise StepResolutionError(
            f"h/eps = {cfg.h / sys.epsilon:.3g} exceeds {cfg.fast_step_fraction:.3g} "
            f"x shortest fast period {cfg.min_fast_period:.3g}")
    return _record_run(sys, x_start, t_end_slow, cfg, mode="slow", tracker=tracker)


def integrate_sde(sys, x_start, t_end_slow, cfg=None, tracker=None, delta=None):
    """Stratonovich SDE in slow time via the Heun scheme plus projection.

    With delta = 0 this reduces exactly to integrate_slow stepping when the
    same method is selected (the noise arithmetic is skipped, not zeroed).
    """
    cfg = cfg or IntegratorConfig(h=min(1e-4, sys.epsilon * 0.1), method="heun-stratonovich")
    dlt = sys.delta if delta is None else delta
    if dlt == 0.0:
        return _record_run(sys, x_start, t_end_slow, cfg, mode="slow", tracker=tracker)
    return _record_run(sys, x_start, t_end_slow, cfg, mode="sde",
                       rng_seed=cfg.seed, tracker=tracker, delta=dlt)


# ---------------------------------------------------------------------------
# uniform sampling on a surface cap

def surface_distance(sys: SurfaceSystem, x, y):
    """Geodesic distance on {F=z}: exact arc length on the sphere family,
    chordal elsewhere (the difference is below tolerance at the radii used)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if sys.meta.get("family") in ("canonical-sphere", "cap"):
        r = np.sqrt(2.0 * sys.z)
        ratio = np.clip(np.sum(x * y, axis=-1) / r**2, -1.0, 1.0)
        return r * np.arccos(ratio)
    return np.linalg.norm(x - y, axis=-1)


def sample_uniform_neighborhood(sys, center, radius, rng, max_tries=200, min_cos=0.5):
    """One point on {F=z}, uniform w.r.t. surface area on the geodesic cap.

    Proposes uniformly on the tangent disk at the center, pushes along the
    fixed center normal onto the surface, and rejection-corrects with the
    exact area Jacobian 1/|n(x).n(center)| of that projection.
    """
    center = project_to_surface(sys.F, sys.z, np.asarray(center, float))
    n_c = unit_normal(sys, center[None])[0]
    # orthonormal tangent frame at the center
    a = np.array([1.0, 0.0, 0.0])
    if abs(np.dot(a, n_c)) > 0.9:
        a = np.array([0.0, 1.0, 0.0])
    e1 = a - np.dot(a, n_c) * n_c
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n_c, e1)
    r_prop = 1.25 * radius
    accepted = 0
    for attempt in range(1, max_tries + 1):
        u = rng.random()
        phi = 2.0 * np.pi * rng.random()
        rr = r_prop * np.sqrt(u)
        p = center + rr * (np.cos(phi) * e1 + np.sin(phi) * e2)
        x = _push_along(sys, p, n_c)
        if x is None:
            continue
        if surface_distance(sys, x, center) >= radius:
            continue
        cos_t = abs(float(np.dot(unit_normal(sys, x[None])[0], n_c)))
        if cos_t < min_cos:
            raise RejectionOverflowError("cap too curved for the fixed-direction sampler")
        if rng.random() < min_cos / cos_t:
            return x
    raise RejectionOverflowError(f"acceptance rate below 1/{max_tries}")


def _push_along(sys, p, direction, tol=1e-12, max_iter=80):
    """Solve F(p + s*direction) = z for s by 1-D Newton."""
    s = 0.0
    for _ in range(max_iter):
        x = p + s * direction
        r = float(sys.F.value(x)) - sys.z
        if abs(r) <= tol:
            return x
        slope = float(np.dot(sys.F.gradient(x), direction))
        if abs(slope) < 1e-14:
            return None
        s -= r / slope
    return None
