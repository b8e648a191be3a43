"""Averaged coefficients on the quotient graph and everything derived from them.

Per edge k and level g, the traced curve carries four time-weighted loop
integrals (all with the measure dl/|grad F x grad G|):

    T_k(g)   : 1                         (rotation period)
    A_k(g)   : grad G . slow drift       (deterministic drift numerator)
    A1_k(g)  : grad G . Sigma            (Stratonovich-to-Ito drift part)
    A2_k(g)  : sum_ij a_ij d2G/dxi dxj   (second-order noise drift part)
    B_k(g)   : |sigma^T grad G|^2        (diffusion numerator)

The slow deterministic motion solves dg/dt = A_k/T_k; the slow diffusion has
generator (A + d^2/2 (A1+A2))/T d/dg + (d^2/2)(B/T) d2/dg2.  Saddle-level
limits of B give the gluing weights; limits of A give (via the Stokes route)
the branching probabilities; the integrals of A/B over the wells give the
metastable time-scale thresholds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import (DivergentIntegralError, EdgeRangeError, ExtrapolationError,
                     SignViolationError, SlowfastError, StallError)
from .fields import (SurfaceSystem, slow_drift, ito_correction, curl_of_cross,
                     unit_normal, project_to_surface)
from .levelsets import (ReebGraph, LevelCurve, trace_level_curve, line_functional,
                        point_at_level, linearized_period)


# ---------------------------------------------------------------------------
# pointwise integrands

def phi_drift(sys):
    def phi(p):
        return np.sum(sys.G.gradient(p) * slow_drift(sys, p), axis=-1)
    return phi


def phi_ito_drift(sys):
    def phi(p):
        return np.sum(sys.G.gradient(p) * ito_correction(sys, p), axis=-1)
    return phi


def phi_second_order(sys):
    def phi(p):
        s = sys.noise.sigma(p)
        a = np.einsum("...ij,...kj->...ik", s, s)
        return np.einsum("...ij,...ij->...", a, sys.G.hessian(p))
    return phi


def phi_diffusion(sys):
    def phi(p):
        s = sys.noise.sigma(p)
        stg = np.einsum("...ji,...j->...i", s, sys.G.gradient(p))
        return np.sum(stg * stg, axis=-1)
    return phi


# ---------------------------------------------------------------------------
# direct per-level coefficients

def _curve(sys, graph, k, g):
    return trace_level_curve(sys, g, graph.seed(k, g))


def drift_coefficient(sys: SurfaceSystem, graph: ReebGraph, k, g, curve=None):
    """Averaged slow drift A_k(g)/T_k(g) of dg/dt, from the line-integral route."""
    e = graph.edge(k)
    if curve is None:
        if not e.contains(g):
            raise EdgeRangeError(f"g={g} outside edge {k}")
        curve = _curve(sys, graph, k, g)
    a = line_functional(curve, phi_drift(sys), name="A")
    return a / curve.period


def noise_coefficients(sys: SurfaceSystem, graph: ReebGraph, k, g, curve=None):
    """The four loop functionals (A, A1, A2, B) at (k, g)."""
    if sys.noise is None:
        raise SlowfastError("noise_coefficients requires a noise map")
    e = graph.edge(k)
    if curve is None:
        if not e.contains(g):
            raise EdgeRangeError(f"g={g} outside edge {k}")
        curve = _curve(sys, graph, k, g)
    a = line_functional(curve, phi_drift(sys), name="A")
    a1 = line_functional(curve, phi_ito_drift(sys), name="A1")
    a2 = line_functional(curve, phi_second_order(sys), name="A2")
    b = line_functional(curve, phi_diffusion(sys), name="B")
    return a, a1, a2, b


# ---------------------------------------------------------------------------
# tabulated coefficients

@dataclass
class EdgeTable:
    edge_id: int
    g: np.ndarray
    T: np.ndarray
    A: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    B: np.ndarray
    g_lo: float
    g_hi: float
    lower_is_min: bool
    upper_is_boundary: bool
    _interps: dict = dc_field(default_factory=dict, repr=False)

    def _interp(self, col):
        if col not in self._interps:
            self._interps[col] = PchipInterpolator(self.g, getattr(self, col), extrapolate=False)
        return self._interps[col]

    def _eval(self, col, g):
        g_cl = np.clip(g, self.g[0], self.g[-1])
        return self._interp(col)(g_cl)

    def drift(self, g, delta=0.0):
        """(A + delta^2/2 (A1+A2)) / T."""
        num = self._eval("A", g)
        if delta != 0.0:
            num = num + 0.5 * delta**2 * (self._eval("A1", g) + self._eval("A2", g))
        return num / self._eval("T", g)

    def diffusion_sq(self, g, delta):
        """delta^2 B / T (the squared diffusion coefficient of dg)."""
        return delta**2 * self._eval("B", g) / self._eval("T", g)

    def ratio_drift_over_diff(self, g):
        return self._eval("A", g) / self._eval("B", g)


def _edge_grid(e, graph, n, inner_rel=4e-5):
    """Geometric clustering toward singular ends (saddle and minimum tips)."""
    span = e.g_hi - e.g_lo
    n_side = max(4, n // 2)
    rel = np.geomspace(inner_rel, 0.5, n_side)
    lo_pts = e.g_lo + rel * span
    hi_pts = e.g_hi - rel * span
    pts = np.unique(np.concatenate([lo_pts, hi_pts]))
    upper_v = graph.vertices[e.upper_vertex]
    if upper_v.kind == "boundary-P":
        pts = np.unique(np.append(pts, e.g_hi))
    return np.sort(pts)


def tabulate_edge(sys, graph, edge_id, n=33, inner_rel=4e-5):
    e = graph.edge(edge_id)
    grid = _edge_grid(e, graph, n, inner_rel)
    has_noise = sys.noise is not None
    cols = {"T": [], "A": [], "A1": [], "A2": [], "B": []}
    pA = phi_drift(sys)
    pA1 = phi_ito_drift(sys) if has_noise else None
    pA2 = phi_second_order(sys) if has_noise else None
    pB = phi_diffusion(sys) if has_noise else None
    seed = None
    for g in grid:
        seed = graph.seed(edge_id, g) if seed is None else point_at_level(sys, seed, g)
        c = trace_level_curve(sys, g, seed)
        seed = c.points[0]
        cols["T"].append(c.period)
        cols["A"].append(line_functional(c, pA))
        cols["A1"].append(line_functional(c, pA1) if has_noise else 0.0)
        cols["A2"].append(line_functional(c, pA2) if has_noise else 0.0)
        cols["B"].append(line_functional(c, pB) if has_noise else 0.0)
    lower_v = graph.vertices[e.lower_vertex]
    upper_v = graph.vertices[e.upper_vertex]
    lower_is_min = lower_v.kind == "extremum"
    if lower_is_min:
        # exact tip row: the loop shrinks to the minimum, functionals converge
        # to pointwise values times the linearized period
        m = e.minimum
        t_lin = linearized_period(sys, m)
        x = m.x[None]
        a_tip = 0.0                      # grad G is normal there
        a1_tip = float(np.sum(sys.G.gradient(x) * ito_correction(sys, x))) * t_lin if has_noise else 0.0
        a2_tip = float(phi_second_order(sys)(x)[0]) * t_lin if has_noise else 0.0
        b_tip = 0.0
        grid = np.insert(grid, 0, e.g_lo)
        for key, val in (("T", t_lin), ("A", a_tip), ("A1", a1_tip),
                         ("A2", a2_tip), ("B", b_tip)):
            cols[key].insert(0, val)
    return EdgeTable(edge_id=edge_id, g=np.asarray(grid),
                     T=np.asarray(cols["T"]), A=np.asarray(cols["A"]),
                     A1=np.asarray(cols["A1"]), A2=np.asarray(cols["A2"]),
                     B=np.asarray(cols["B"]),
                     g_lo=e.g_lo, g_hi=e.g_hi,
                     lower_is_min=lower_is_min,
                     upper_is_boundary=upper_v.kind == "boundary-P")


@dataclass
class CoefficientSet:
    tables: dict
    system_hash: str

    def table(self, k) -> EdgeTable:
        return self.tables[k]


_COEFF_MEMO = {}


def system_hash(sys: SurfaceSystem):
    payload = {"name": sys.name, "meta": sys.meta, "z": sys.z,
               "x0": [float(v) for v in np.asarray(sys.x0).ravel()],
               "form": sys.perturbation_form}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def coefficient_set(sys, graph, n=33, cache_dir=None):
    """Tabulate all edges; memoized on (system hash, edge ids, n).

    Coefficients do not depend on epsilon or delta, so the key covers only
    the geometric content of the system.  With ``cache_dir`` set, tables are
    also stored as .npz files addressed by the same key.
    """
    key = (system_hash(sys), tuple(sorted(graph.edges)), n)
    if key in _COEFF_MEMO:
        return _COEFF_MEMO[key]
    fname = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        fname = os.path.join(cache_dir, f"coeffs_{key[0]}_{n}.npz")
        if os.path.exists(fname):
            cs = _load_coeffs(fname, graph)
            _COEFF_MEMO[key] = cs
            return cs
    tables = {k: tabulate_edge(sys, graph, k, n=n) for k in graph.edges}
    cs = CoefficientSet(tables=tables, system_hash=key[0])
    _COEFF_MEMO[key] = cs
    if fname is not None:
        _save_coeffs(fname, cs)
    return cs


def _save_coeffs(fname, cs):
    payload = {}
    for k, t in cs.tables.items():
        for col in ("g", "T", "A", "A1", "A2", "B"):
            payload[f"{k}_{col}"] = getattr(t, col)
        payload[f"{k}_scalars"] = np.array([t.g_lo, t.g_hi, float(t.lower_is_min),
                                            float(t.upper_is_boundary)])
    np.savez(fname, **payload)


def _load_coeffs(fname, graph):
    data = np.load(fname)
    tables = {}
    for k in graph.edges:
        s = data[f"{k}_scalars"]
        tables[k] = EdgeTable(edge_id=k, g=data[f"{k}_g"], T=data[f"{k}_T"],
                              A=data[f"{k}_A"], A1=data[f"{k}_A1"],
                              A2=data[f"{k}_A2"], B=data[f"{k}_B"],
                              g_lo=float(s[0]), g_hi=float(s[1]),
                              lower_is_min=bool(s[2]), upper_is_boundary=bool(s[3]))
    return CoefficientSet(tables=tables, system_hash=system_hash(graph.sys))


def export_tables_csv(path, coeffs: CoefficientSet):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge", "g", "T", "A", "A1", "A2", "B"])
        for k in sorted(coeffs.tables):
            t = coeffs.tables[k]
            for i in range(len(t.g)):
                w.writerow([k, t.g[i], t.T[i], t.A[i], t.A1[i], t.A2[i], t.B[i]])


# ---------------------------------------------------------------------------
# saddle-level limits: gluing weights and branching probabilities

def aitken_limit(values):
    """Aitken delta-squared estimate of the limit of a 3-term sequence."""
    y0, y1, y2 = values
    d1, d2 = y1 - y0, y2 - y1
    if abs(d2) >= abs(d1):
        raise ExtrapolationError(f"sequence not stabilizing: {values}")
    denom = d2 - d1
    if denom == 0:
        return y2
    return y2 - d2 * d2 / denom


def _incident_edges(graph, saddle_index=0):
    s = graph.saddles[saddle_index]
    sv = next(v for v in graph.vertices.values()
              if v.kind == "saddle" and abs(v.g - s.g) < 1e-14)
    below = [e for e in graph.edges.values() if e.upper_vertex == sv.id]
    above = [e for e in graph.edges.values() if e.lower_vertex == sv.id]
    if len(below) != 2 or len(above) != 1:
        raise SlowfastError("saddle vertex is not of merge type")
    below.sort(key=lambda e: e.id)
    return s, below, above[0]


@dataclass
class SaddleData:
    saddle_g: float
    well_edge_ids: tuple
    upper_edge_id: int
    beta: dict
    q: dict
    p1: float
    p3: float
    well_flux: dict
    line_limits: dict
    route_rel_diff: float
    beta_additivity_rel: float

    @property
    def p(self):
        k1, k3 = self.well_edge_ids
        return {k1: self.p1, k3: self.p3}


def gluing_weights(sys, graph, saddle_index=0, g_seq=(1e-2, 1e-3, 1e-4)):
    """Saddle-level limits of the diffusion numerator B on each incident edge.

    The homoclinic level curve seen from the outer edge is the union of the
    two well loops, so the outer weight must equal the sum of the well
    weights; the relative defect of that identity is recorded.
    """
    if sys.noise is None:
        raise SlowfastError("gluing weights require a noise map")
    s, below, above = _incident_edges(graph, saddle_index)
    pB = phi_diffusion(sys)
    beta = {}
    for e, side in [(below[0], -1), (below[1], -1), (above, +1)]:
        span = e.g_hi - e.g_lo
        vals = []
        for off in g_seq:
            g = s.g + side * off * min(1.0, span)
            c = _curve(sys, graph, e.id, g)
            vals.append(line_functional(c, pB))
        beta[e.id] = aitken_limit(vals)
    if any(b <= 0 for b in beta.values()):
        raise SignViolationError(f"non-positive gluing weight: {beta}")
    total = sum(beta.values())
    q = {k: b / total for k, b in beta.items()}
    add_rel = abs(beta[above.id] - (beta[below[0].id] + beta[below[1].id])) / beta[above.id]
    return {"saddle_g": s.g, "beta": beta, "q": q,
            "well_edge_ids": (below[0].id, below[1].id),
            "upper_edge_id": above.id, "beta_additivity_rel": add_rel}


def well_surface_flux(sys, graph, edge_id, integrand, boundary_offset_rel=4e-4,
                      n_loop=256, n_radial=24, rel_tol=1e-3, max_refine=4):
    """Flux of a pointwise integrand over the well region bounded by the
    near-separatrix loop, by a radial fan triangulation from the minimum.

    All fan nodes are projected onto {F=z}; triangle areas are the flat
    areas of the projected triangles (second-order accurate).  Resolution is
    doubled until the value changes by less than ``rel_tol``.
    """
    e = graph.edge(edge_id)
    if e.minimum is None:
        raise SlowfastError("surface flux needs a well edge")
    span = e.g_hi - e.g_lo
    g_b = e.g_hi - boundary_offset_rel * span
    loop = _curve(sys, graph, edge_id, g_b)
    prev = None
    for it in range(max_refine):
        val = _fan_flux(sys, e.minimum.x, loop.points, integrand, n_loop, n_radial)
        if prev is not None and abs(val - prev) <= rel_tol * max(abs(val), 1e-300):
            return val
        prev = val
        n_loop *= 2
        n_radial *= 2
    return prev


def _resample_loop(points, n):
    """n points equally spaced in arclength along a closed polyline."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=-1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    targets = np.linspace(0.0, total, n, endpoint=False)
    out = np.empty((n, 3))
    for d in range(3):
        out[:, d] = np.interp(targets, s, points[:, d])
    return out


def _fan_flux(sys, center, loop_points, integrand, n_loop, n_radial):
    loop = _resample_loop(loop_points, n_loop)
    r = np.linspace(0.0, 1.0, n_radial + 1)
    # nodes[i, j] = center + r_i * (loop_j - center), projected to the surface
    raw = center[None, None, :] + r[:, None, None] * (loop[None, :, :] - center[None, None, :])
    nodes = project_to_surface(sys.F, sys.z, raw.reshape(-1, 3)).reshape(n_radial + 1, n_loop, 3)
    total = 0.0
    jp = (np.arange(n_loop) + 1) % n_loop
    for i in range(n_radial):
        a = nodes[i]
        b = nodes[i + 1]
        # two triangles per quad: (a_j, b_j, b_{j+1}) and (a_j, b_{j+1}, a_{j+1})
        for t1, t2, t3 in ((a, b, b[jp]), (a, b[jp], a[jp])):
            cent = project_to_surface(sys.F, sys.z, (t1 + t2 + t3) / 3.0)
            area = 0.5 * np.linalg.norm(np.cross(t2 - t1, t3 - t1), axis=-1)
            total += float(np.sum(area * integrand(cent)))
    return total


def curl_flux_integrand(sys):
    """Surface-flux integrand matching the drift loop integral via Stokes.

    grad G . (grad F x (grad F x b)) integrates along the orbit to minus the
    circulation of grad F x b, so the b-form flux integrand is
    curl(grad F x b) . n; for the cross form (drift grad F x w) the scalar
    triple product reduces the circulation to that of w itself, giving
    curl(w) . n.
    """
    if sys.perturbation_form == "b":
        def integrand(p):
            c = curl_of_cross(sys.F, sys.perturbation, p)
            return np.sum(c * unit_normal(sys, p), axis=-1)
    else:
        def integrand(p):
            J = sys.perturbation.jacobian(p)
            c = np.stack([J[..., 2, 1] - J[..., 1, 2],
                          J[..., 0, 2] - J[..., 2, 0],
                          J[..., 1, 0] - J[..., 0, 1]], axis=-1)
            return np.sum(c * unit_normal(sys, p), axis=-1)
    return integrand


def branching_probabilities(sys, graph, saddle_index=0, g_seq=(1e-2, 1e-3, 1e-4),
                            rel_tol=1e-3):
    """Probabilities of entering each well at the saddle, two independent ways.

    Route (a): saddle-level limits of the drift numerator A on the two well
    edges (the line-integral route).  Route (b): direct surface quadrature
    of curl(grad F x (grad F x b)) . n over the well regions.  Friction-like
    perturbations make both surface integrals positive; the two routes are
    reconciled and the surface route defines the returned probabilities.
    """
    s, below, above = _incident_edges(graph, saddle_index)
    pA = phi_drift(sys)
    line_limits = {}
    for e in below:
        span = e.g_hi - e.g_lo
        vals = []
        for off in g_seq:
            g = s.g - off * min(1.0, span)
            c = _curve(sys, graph, e.id, g)
            vals.append(line_functional(c, pA))
        lim = aitken_limit(vals)
        line_limits[e.id] = -lim          # A < 0 for friction; store with the flux sign
    integrand = curl_flux_integrand(sys)
    flux = {e.id: well_surface_flux(sys, graph, e.id, integrand, rel_tol=rel_tol)
            for e in below}
    if any(v <= 0 for v in flux.values()):
        raise SignViolationError(
            f"well curl flux non-positive (perturbation not friction-like): {flux}")
    k1, k3 = below[0].id, below[1].id
    p1 = flux[k1] / (flux[k1] + flux[k3])
    p3 = 1.0 - p1
    rel = max(abs(line_limits[k] - flux[k]) / abs(flux[k]) for k in (k1, k3))
    return {"p1": p1, "p3": p3, "well_flux": flux, "line_limits": line_limits,
            "route_rel_diff": rel, "well_edge_ids": (k1, k3)}


def saddle_data(sys, graph, saddle_index=0, g_seq=(1e-2, 1e-3, 1e-4)) -> SaddleData:
    """Gluing weights plus branching probabilities for one saddle."""
    bp = branching_probabilities(sys, graph, saddle_index, g_seq)
    if sys.noise is not None:
        gw = gluing_weights(sys, graph, saddle_index, g_seq)
    else:
        gw = {"beta": {}, "q": {}, "beta_additivity_rel": np.nan,
              "well_edge_ids": bp["well_edge_ids"], "upper_edge_id": None,
              "saddle_g": graph.saddles[saddle_index].g}
    return SaddleData(saddle_g=gw["saddle_g"], well_edge_ids=bp["well_edge_ids"],
                      upper_edge_id=gw.get("upper_edge_id"),
                      beta=gw["beta"], q=gw["q"], p1=bp["p1"], p3=bp["p3"],
                      well_flux=bp["well_flux"], line_limits=bp["line_limits"],
                      route_rel_diff=bp["route_rel_diff"],
                      beta_additivity_rel=gw["beta_additivity_rel"])


# ---------------------------------------------------------------------------
# the slow deterministic motion on the graph

@dataclass
class SlowPath:
    times: np.ndarray
    gs: np.ndarray
    edge_ids: np.ndarray
    tau0: Optional[float]

    def g_of_t(self, t):
        return np.interp(t, self.times, self.gs)

    def state_of_t(self, t):
        i = np.searchsorted(self.times, t, side="right") - 1
        i = int(np.clip(i, 0, len(self.times) - 1))
        return int(self.edge_ids[i]), float(np.interp(t, self.times, self.gs))

    @property
    def t_end(self):
        return float(self.times[-1])


def _edge_time_profile(sys, graph, edge_id, g_from, g_to, n=28, inner_rel=1e-5):
    """Times t(g) for the averaged motion dg/dt = A/T from g_from toward g_to.

    Returns (gs, ts) with ts[0] = 0 at g_from.  The integrand T/|A| has a
    |log| singularity at a saddle endpoint, integrated in closed form from a
    two-point fit, and a 1/(g - g_min) divergence at a minimum endpoint, so
    the profile simply stops at the clustering offset there.
    """
    e = graph.edge(edge_id)
    span = e.g_hi - e.g_lo
    lo, hi = min(g_from, g_to), max(g_from, g_to)
    upper_v = graph.vertices[e.upper_vertex]
    lower_v = graph.vertices[e.lower_vertex]
    # interior quadrature grid, clustered toward singular endpoints
    off = inner_rel * span
    a = max(lo, e.g_lo + (off if lower_v.kind != "boundary-P" else 0.0))
    b = min(hi, e.g_hi - (off if upper_v.kind != "boundary-P" else 0.0))
    rel = np.geomspace(inner_rel, 0.5, n // 2)
    pts = np.unique(np.concatenate([a + rel * (b - a), b - rel * (b - a), [a, b]]))
    pts = np.clip(pts, a, b)
    pts = np.unique(pts)
    ratio = np.empty(len(pts))
    seed = None
    for i, g in enumerate(pts):
        seed = graph.seed(edge_id, g) if seed is None else point_at_level(sys, seed, g)
        c = trace_level_curve(sys, g, seed)
        seed = c.points[0]
        A = line_functional(c, phi_drift(sys))
        if A >= 0:
            raise StallError(f"averaged drift vanished/positive at g={g} on edge {edge_id}")
        ratio[i] = c.period / (-A)
    interp = PchipInterpolator(pts, ratio)
    anti = interp.antiderivative()

    def time_between(ga, gb):
        # time to move downward from gb to ga (gb > ga), both within [a, b]
        return float(anti(gb) - anti(ga))

    # output grid along the direction of motion (g decreasing)
    gs_out = pts[::-1].copy()
    ts_out = np.array([time_between(g, pts[-1]) for g in gs_out])
    # saddle tail: add the closed-form time from the last grid point to the
    # saddle level itself when the motion exits through it
    tail_time = 0.0
    if abs(g_to - e.g_lo) < off * 1.01 and lower_v.kind == "saddle":
        r1, r0 = ratio[0], ratio[1]
        g1, g0 = pts[0] - e.g_lo, pts[1] - e.g_lo
        # fit ratio = c1 |ln(g - gs)| + c0 on the innermost nodes
        l1, l0 = abs(np.log(g1)), abs(np.log(g0))
        c1 = (r1 - r0) / (l1 - l0)
        c0 = r1 - c1 * l1
        tail_time = c1 * g1 * (1.0 - np.log(g1)) + c0 * g1
        gs_out = np.append(gs_out, e.g_lo)
        ts_out = np.append(ts_out, ts_out[-1] + tail_time)
    return gs_out, ts_out


def solve_slow_ode(sys, graph, start, t_end, well_choice=None, n=28):
    """Averaged path from ``start = (edge id, g)``: down the starting edge,
    through the saddle into the chosen well, then toward (never reaching)
    the well minimum.  Returns the path and the saddle-hitting time tau0."""
    k0, g0 = start
    e0 = graph.edge(k0)
    if not e0.contains(g0, closed=False):
        raise EdgeRangeError(f"start {start} outside edge range")
    segs = []
    tau0 = None
    t_acc = 0.0
    k, g = k0, g0
    while True:
        e = graph.edge(k)
        lower_v = graph.vertices[e.lower_vertex]
        gs, ts = _edge_time_profile(sys, graph, k, g, e.g_lo, n=n)
        # clip the profile to start at the requested g
        mask = gs <= g + 1e-15
        gs, ts = gs[mask], ts[mask]
        ts = ts - ts[0]
        segs.append((k, gs, ts + t_acc))
        t_acc += ts[-1]
        if lower_v.kind == "saddle":
            tau0 = t_acc if tau0 is None else tau0
            nxt = _choose_well(graph, lower_v, well_choice)
            k = nxt
            g = graph.edge(nxt).g_hi
            if t_acc >= t_end:
                break
            continue
        break
    times = np.concatenate([s[2] for s in segs])
    gs = np.concatenate([s[1] for s in segs])
    edge_ids = np.concatenate([np.full(len(s[1]), s[0]) for s in segs])
    keep = times <= t_end
    if not np.all(keep):
        times, gs, edge_ids = times[keep], gs[keep], edge_ids[keep]
    return SlowPath(times=times, gs=gs, edge_ids=edge_ids.astype(int), tau0=tau0)


def _choose_well(graph, saddle_vertex, well_choice):
    below = [e for e in graph.edges.values() if e.upper_vertex == saddle_vertex.id]
    below.sort(key=lambda e: e.id)
    if well_choice is None:
        raise SlowfastError("path reaches a saddle: a well choice is required")
    if isinstance(well_choice, dict):
        return well_choice[saddle_vertex.id]
    if well_choice in [e.id for e in below]:
        return well_choice
    raise SlowfastError(f"well choice {well_choice} not among {[e.id for e in below]}")


# ---------------------------------------------------------------------------
# metastable time-scale thresholds

@dataclass
class MetastableReport:
    lambda_by_edge: dict
    lambda1: float
    lambda3: float
    well_edge_ids: tuple
    tie: bool
    grid_stability_rel: float
    p1: float
    p3: float
    decision_table: list
    notes: str

    def to_json(self):
        def clean(obj):
            if isinstance(obj, dict):
                return {str(k): clean(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [clean(v) for v in obj]
            if isinstance(obj, (np.floating, np.integer)):
                return float(obj)
            if isinstance(obj, np.bool_):
                return bool(obj)
            return obj
        return json.dumps(clean({
            "lambda_by_edge": self.lambda_by_edge,
            "lambda1": self.lambda1, "lambda3": self.lambda3,
            "tie": self.tie, "grid_stability_rel": self.grid_stability_rel,
            "p1": self.p1, "p3": self.p3,
            "decision_table": self.decision_table, "notes": self.notes}), indent=2)

    def predict(self, start_edge, lam):
        """Distribution over well edges at the exp(lam/delta^2) horizon."""
        for row in self.decision_table:
            if row["start_edge"] == start_edge and row["lam_lo"] <= lam < row["lam_hi"]:
                return row["distribution"]
        raise SlowfastError(f"no decision row for start={start_edge}, lam={lam}")


def _well_threshold(sys, graph, edge_id, n_nodes=24, tip_rel=2e-4, sad_rel=2e-4):
    """lambda = - integral over the well of (A/B) dg, endpoint-corrected.

    Both A and B vanish linearly at the minimum; the ratio is extended by a
    local fit.  At the saddle end both limits are finite and nonzero.
    """
    e = graph.edge(edge_id)
    span = e.g_hi - e.g_lo
    a = e.g_lo + tip_rel * span
    b = e.g_hi - sad_rel * span
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    gs = 0.5 * (a + b) + 0.5 * (b - a) * nodes
    w = 0.5 * (b - a) * weights
    vals = np.empty(len(gs))
    seed = None
    order = np.argsort(gs)
    for i in order:
        g = gs[i]
        seed = graph.seed(edge_id, g) if seed is None else point_at_level(sys, seed, g)
        c = trace_level_curve(sys, g, seed)
        seed = c.points[0]
        A = line_functional(c, phi_drift(sys))
        B = line_functional(c, phi_diffusion(sys))
        if B <= 0:
            raise DivergentIntegralError(f"non-positive diffusion numerator at g={g}")
        vals[i] = A / B
    if not np.all(np.isfinite(vals)):
        raise DivergentIntegralError("threshold integrand not finite")
    core = float(np.sum(w * vals))
    # endpoint strips: constant ratio from the nearest interior values
    tip_ratio = vals[order[0]]
    sad_ratio = vals[order[-1]]
    total = core + tip_ratio * (a - e.g_lo) + sad_ratio * (e.g_hi - b)
    return -total


def metastable_thresholds(sys, graph, saddle_index=0, n_nodes=24,
                          saddle=None) -> MetastableReport:
    """Escape thresholds for both wells plus the location decision table.

    For each well edge, lambda = -int A/B dg over the well.  The published
    statement of the decision table lists the mixed-outcome case under a
    start in the deep-well edge; the dynamics of the limiting graph process
    place the mixture at starts on the edge above the saddle (mass branches
    (p1,p3) and, below the smaller threshold, neither well releases it), so
    the table below uses that assignment and the discrepancy is flagged.
    """
    if sys.noise is None:
        raise SlowfastError("thresholds require a noise map")
    s, below, above = _incident_edges(graph, saddle_index)
    lam = {}
    stab = 0.0
    for e in below:
        l1 = _well_threshold(sys, graph, e.id, n_nodes=n_nodes)
        l2 = _well_threshold(sys, graph, e.id, n_nodes=2 * n_nodes)
        lam[e.id] = l2
        stab = max(stab, abs(l2 - l1) / max(abs(l2), 1e-300))
    sd = saddle if saddle is not None else saddle_data(sys, graph, saddle_index)
    k1, k3 = sd.well_edge_ids
    lam1, lam3 = lam[k1], lam[k3]
    tie = abs(lam1 - lam3) <= 1e-3 * max(abs(lam1), abs(lam3))
    lo_k, hi_k = (k1, k3) if lam1 <= lam3 else (k3, k1)
    lo, hi = min(lam1, lam3), max(lam1, lam3)
    INF = float("inf")
    table = []
    if not tie:
        deep = {deep_k: 1.0 for deep_k in [hi_k]}
        table = [
            {"start_edge": lo_k, "lam_lo": 0.0, "lam_hi": lo, "distribution": {lo_k: 1.0}},
            {"start_edge": lo_k, "lam_lo": lo, "lam_hi": INF, "distribution": dict(deep)},
            {"start_edge": above.id, "lam_lo": 0.0, "lam_hi": lo,
             "distribution": {k1: sd.p1, k3: sd.p3}},
            {"start_edge": above.id, "lam_lo": lo, "lam_hi": INF, "distribution": dict(deep)},
            {"start_edge": hi_k, "lam_lo": 0.0, "lam_hi": INF, "distribution": dict(deep)},
        ]
        notes = ("decision table uses the dynamically consistent case labels; "
                 "the published statement lists the mixed case under a start in "
                 "the deep-well edge and the certain-deep case under the "
                 "above-saddle edge (labels interchanged)")
    else:
        table = [
            {"start_edge": k1, "lam_lo": 0.0, "lam_hi": lo, "distribution": {k1: 1.0}},
            {"start_edge": k3, "lam_lo": 0.0, "lam_hi": lo, "distribution": {k3: 1.0}},
            {"start_edge": above.id, "lam_lo": 0.0, "lam_hi": lo,
             "distribution": {k1: sd.p1, k3: sd.p3}},
        ]
        notes = ("thresholds tie (symmetric system): the strict-ordering hypothesis "
                 "fails and only the below-threshold rows are meaningful")
    return MetastableReport(lambda_by_edge=lam, lambda1=lam1, lambda3=lam3,
                            well_edge_ids=(k1, k3), tie=tie,
                            grid_stability_rel=stab, p1=sd.p1, p3=sd.p3,
                            decision_table=table, notes=notes)
