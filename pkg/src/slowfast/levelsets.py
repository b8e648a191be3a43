"""Geometry of the level-curve foliation of {F = z}.

The energy G restricted to the working surface is assumed Morse.  This
module finds its critical points, traces the closed intersection curves
{F=z, G=g} with a predictor/corrector walker, evaluates the time-weighted
line functionals that feed all averaged coefficients, and quotients the
surface into a graph: one edge per family of connected level-curve
components, interior vertices at saddles, exterior vertices at extrema and
at the outer boundary curve.

Supported Morse families: any number of minima and merge-type saddles below
the boundary level, all maxima above it (the canonical systems, the cap and
the hand-tuned multi-saddle test fields all satisfy this).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .errors import (CurveEscapeError, DegenerateCriticalPointError,
                     NonGenericLevelsError, SeparatrixAmbiguityError,
                     SlowfastError)
from .fields import SurfaceSystem, SmoothField, project_to_surface, surface_cloud


# ---------------------------------------------------------------------------
# critical points

@dataclass
class CriticalPoint:
    x: np.ndarray
    g: float
    kind: str                    # "min" | "max" | "saddle"
    lagrange: float              # grad G = lagrange * grad F at the point
    tangential_eigs: np.ndarray  # eigenvalues of the constrained Hessian
    stability: str               # under a friction-like perturbed flow


def _tangent_frame(n):
    a = np.array([1.0, 0.0, 0.0])
    if abs(np.dot(a, n)) > 0.9:
        a = np.array([0.0, 1.0, 0.0])
    e1 = a - np.dot(a, n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def tangential_hessian(sys: SurfaceSystem, x, lagrange):
    """2x2 Hessian of G - lagrange*F in an orthonormal tangent frame."""
    n = sys.F.gradient(x)
    n = n / np.linalg.norm(n)
    e1, e2 = _tangent_frame(n)
    H = sys.G.hessian(x) - lagrange * sys.F.hessian(x)
    E = np.stack([e1, e2], axis=0)
    return E @ H @ E.T, (e1, e2)


def _classify_eigs(eigs, tol=1e-6):
    if np.any(np.abs(eigs) < tol):
        raise DegenerateCriticalPointError(f"tangential Hessian eigenvalues {eigs}")
    if np.all(eigs > 0):
        return "min"
    if np.all(eigs < 0):
        return "max"
    return "saddle"


_STABILITY = {"min": "asymptotically-stable", "max": "unstable", "saddle": "saddle"}


def find_critical_points(sys: SurfaceSystem, n_starts=400, seed=0, newton_tol=1e-13,
                         max_newton=60, dedupe_tol=1e-6, degenerate_tol=1e-6):
    """All points on {F=z} with vanishing tangential gradient of G.

    Multistart Newton on the Lagrange system (grad G - lam grad F, F - z),
    deduplicated and classified by the constrained Hessian signature.
    """
    rng = np.random.default_rng(seed)
    starts = surface_cloud(sys, n_starts, rng)
    found = []
    for x0 in starts:
        sol = _newton_lagrange(sys, x0, newton_tol, max_newton)
        if sol is None:
            continue
        x, lam = sol
        if any(np.linalg.norm(x - c[0]) < dedupe_tol for c in found):
            continue
        found.append((x, lam))
    points = []
    for x, lam in found:
        Ht, _ = tangential_hessian(sys, x, lam)
        eigs = np.linalg.eigvalsh(Ht)
        kind = _classify_eigs(eigs, degenerate_tol)
        points.append(CriticalPoint(x=x, g=float(sys.G.value(x)), kind=kind,
                                    lagrange=float(lam), tangential_eigs=eigs,
                                    stability=_STABILITY[kind]))
    points.sort(key=lambda c: c.g)
    return points


def _newton_lagrange(sys, x0, tol, max_iter):
    x = np.array(x0, dtype=float)
    gf = sys.F.gradient(x)
    gg = sys.G.gradient(x)
    lam = float(np.dot(gg, gf) / np.dot(gf, gf))
    for _ in range(max_iter):
        gf = sys.F.gradient(x)
        gg = sys.G.gradient(x)
        r = np.empty(4)
        r[:3] = gg - lam * gf
        r[3] = sys.F.value(x) - sys.z
        if np.linalg.norm(r) < tol:
            return x, lam
        J = np.zeros((4, 4))
        J[:3, :3] = sys.G.hessian(x) - lam * sys.F.hessian(x)
        J[:3, 3] = -gf
        J[3, :3] = gf
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(step)) or np.linalg.norm(step) > 2.0:
            return None
        x = x + step[:3]
        lam = lam + step[3]
    return None


def linearized_period(sys: SurfaceSystem, cp: CriticalPoint):
    """Rotation period of the conservative drive linearized at an extremum.

    The linearization of grad F x grad G restricted to the tangent plane is
    [grad F x](Hess G - lam Hess F); at a center its eigenvalues are +-i w.
    """
    gf = sys.F.gradient(cp.x)
    H = sys.G.hessian(cp.x) - cp.lagrange * sys.F.hessian(cp.x)
    cross_mat = np.array([[0.0, -gf[2], gf[1]],
                          [gf[2], 0.0, -gf[0]],
                          [-gf[1], gf[0], 0.0]])
    M = cross_mat @ H
    n = gf / np.linalg.norm(gf)
    e1, e2 = _tangent_frame(n)
    E = np.stack([e1, e2], axis=0)
    M2 = E @ M @ E.T
    det = np.linalg.det(M2)
    if det <= 0:
        raise SlowfastError("linearization is not a center")
    return 2.0 * np.pi / np.sqrt(det)


# ---------------------------------------------------------------------------
# level-curve tracing

@dataclass
class LevelCurve:
    g: float
    points: np.ndarray           # (m,3), closed: points[-1] == points[0]
    speeds: np.ndarray           # |grad F x grad W| at the points
    period: float                # time of one rotation of the conservative drive
    edge_id: Optional[int] = None
    functionals: dict = dc_field(default_factory=dict)

    @property
    def length(self):
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=-1)))


def trace_level_curve(sys: SurfaceSystem, g, seed_point, second: Optional[SmoothField] = None,
                      max_step=0.01, min_step=1e-7, curv_target=0.015,
                      corrector_tol=1e-12, max_points=200000):
    """Closed intersection curve {F=z} cap {W=g} through a corrected seed.

    Predictor along the unit conservative velocity, Newton corrector onto
    both constraints, arclength step adapted to the local turning rate.
    The period is the time integral of 1/|velocity| along the polyline.
    """
    W = second if second is not None else sys.G
    F = sys.F
    z = sys.z

    def correct(x):
        for _ in range(30):
            rF = F.value(x) - z
            rW = W.value(x) - g
            if abs(rF) < corrector_tol and abs(rW) < corrector_tol:
                return x
            gf = F.gradient(x)
            gw = W.gradient(x)
            m11 = np.dot(gf, gf)
            m12 = np.dot(gf, gw)
            m22 = np.dot(gw, gw)
            det = m11 * m22 - m12 * m12
            if det <= 1e-30:
                raise CurveEscapeError(f"gradients collinear near level g={g}")
            a = (rF * m22 - rW * m12) / det
            b = (rW * m11 - rF * m12) / det
            step = a * gf + b * gw
            x = x - step
        raise CurveEscapeError(f"corrector failed at g={g}")

    def velocity(x):
        return np.cross(F.gradient(x), W.gradient(x))

    x = correct(np.array(seed_point, dtype=float))
    start = x.copy()
    v = velocity(x)
    sp = np.linalg.norm(v)
    if sp < 1e-14:
        raise CurveEscapeError("seed sits at a critical configuration")
    t_hat = v / sp
    t0 = t_hat.copy()
    pts = [x.copy()]
    ds = max_step
    prev_t = t_hat
    for i in range(max_points):
        x_pred = x + ds * prev_t
        try:
            x_new = correct(x_pred)
        except CurveEscapeError:
            if ds <= min_step * 2:
                raise
            ds = max(min_step, 0.3 * ds)
            continue
        v = velocity(x_new)
        sp = np.linalg.norm(v)
        if sp < 1e-14:
            raise CurveEscapeError("hit a critical configuration while tracing")
        t_new = v / sp
        # turning-rate step control
        turn = np.linalg.norm(t_new - prev_t)
        if turn > 4.0 * curv_target and ds > min_step * 2:
            ds = max(min_step, 0.5 * ds)
            continue
        pts.append(x_new.copy())
        x = x_new
        prev_t = t_new
        ds = float(np.clip(ds * np.clip(curv_target / (turn + 1e-12), 0.5, 1.4),
                           min_step, max_step))
        if i > 4:
            d_close = np.linalg.norm(x - start)
            if d_close < 1.5 * ds and np.dot(t_new, t0) > 0.8:
                break
    else:
        raise CurveEscapeError(f"curve did not close within {max_points} points")
    pts.append(start.copy())
    pts = np.array(pts)
    if np.linalg.norm(pts[-2] - pts[-1]) > 0.1 and len(pts) < 8:
        raise CurveEscapeError("degenerate closure")
    speeds = np.linalg.norm(np.cross(F.gradient(pts), W.gradient(pts)), axis=-1)
    curve = LevelCurve(g=float(g), points=pts, speeds=speeds, period=0.0)
    curve.period = line_functional(curve, lambda p: 1.0)
    return curve


def _trapezoid_loop(pts, f):
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=-1)
    return float(np.sum(seg * 0.5 * (f[:-1] + f[1:])))


def line_functional(curve: LevelCurve, phi, name=None):
    """Loop integral of phi dl / |velocity| (the time-weighted functional).

    Trapezoid rule on the traced polyline, Richardson-extrapolated against
    the 2x-coarsened polyline (valid because every traced point sits exactly
    on the curve).  Equals the time integral of phi(x_t) over one rotation.
    """
    if name is not None and name in curve.functionals:
        return curve.functionals[name]
    pts = curve.points
    vals = phi(pts)
    if np.isscalar(vals) or np.ndim(vals) == 0:
        vals = np.full(len(pts), float(vals))
    f = vals / curve.speeds
    fine = _trapezoid_loop(pts, f)
    idx = np.arange(0, len(pts), 2)
    if idx[-1] != len(pts) - 1:
        idx = np.append(idx, len(pts) - 1)
    coarse = _trapezoid_loop(pts[idx], f[idx])
    out = fine + (fine - coarse) / 3.0
    if name is not None:
        curve.functionals[name] = out
    return out


def point_at_level(sys: SurfaceSystem, anchor, g_target, second: Optional[SmoothField] = None,
                   n_sub=80):
    """March from an anchor to the level {W = g_target} along the tangential
    gradient of W inside {F=z}, then polish with the curve corrector."""
    W = second if second is not None else sys.G
    x = project_to_surface(sys.F, sys.z, np.array(anchor, dtype=float))
    g0 = float(W.value(x))
    if g0 == g_target:
        return x
    gs = np.linspace(g0, g_target, n_sub + 1)
    for g_next in gs[1:]:
        for _ in range(40):
            gw = W.gradient(x)
            gf = sys.F.gradient(x)
            n = gf / np.linalg.norm(gf)
            pt = gw - np.dot(gw, n) * n
            norm2 = np.dot(pt, pt)
            if norm2 < 1e-24:
                raise CurveEscapeError("tangential gradient vanished while seeding")
            r = float(W.value(x)) - g_next
            if abs(r) < 1e-13:
                break
            x = x - (r / norm2) * pt
            x = project_to_surface(sys.F, sys.z, x)
    # final polish onto both constraints
    for _ in range(20):
        rF = sys.F.value(x) - sys.z
        rW = W.value(x) - g_target
        if abs(rF) < 1e-13 and abs(rW) < 1e-13:
            break
        gf = sys.F.gradient(x)
        gw = W.gradient(x)
        m11, m12, m22 = np.dot(gf, gf), np.dot(gf, gw), np.dot(gw, gw)
        det = m11 * m22 - m12 * m12
        a = (rF * m22 - rW * m12) / det
        b = (rW * m11 - rF * m12) / det
        x = x - a * gf - b * gw
    return x


# ---------------------------------------------------------------------------
# the quotient graph

@dataclass
class ReebVertex:
    id: int
    kind: str                    # "extremum" | "saddle" | "boundary-P"
    g: float
    point: Optional[np.ndarray] = None
    critical_point: Optional[CriticalPoint] = None


@dataclass
class ReebEdge:
    id: int
    g_lo: float
    g_hi: float
    lower_vertex: int
    upper_vertex: int
    anchor: np.ndarray           # point from which level seeds are marched
    minimum: Optional[CriticalPoint] = None   # set for well edges

    def contains(self, g, closed=False):
        if closed:
            return self.g_lo <= g <= self.g_hi
        return self.g_lo < g < self.g_hi


class ReebGraph:
    """Tree of level-curve families with the |dg| path metric."""

    def __init__(self, vertices, edges, sys, saddles, boundary_g):
        self.vertices = {v.id: v for v in vertices}
        self.edges = {e.id: e for e in edges}
        self.sys = sys
        self.saddles = saddles              # CriticalPoint list, ascending g
        self.boundary_g = boundary_g

    def edge(self, k):
        return self.edges[k]

    @property
    def well_edges(self):
        return [e for e in self.edges.values() if e.minimum is not None]

    @property
    def saddle_g(self):
        if not self.saddles:
            return None
        return self.saddles[0].g

    def edges_at_vertex(self, vid):
        return [e for e in self.edges.values()
                if e.lower_vertex == vid or e.upper_vertex == vid]

    def seed(self, k, g):
        e = self.edges[k]
        if not e.contains(g):
            from .errors import EdgeRangeError
            raise EdgeRangeError(f"g={g} outside edge {k} range ({e.g_lo}, {e.g_hi})")
        return point_at_level(self.sys, e.anchor, g)

    def rho(self, y1, y2):
        """Path metric: |g1-g2| within an edge, summed through vertices otherwise."""
        (k1, g1), (k2, g2) = y1, y2
        if k1 == k2:
            return abs(g1 - g2)
        # walk each point to every vertex of its edge with the in-edge cost
        dist = {}
        for (k, g) in ((k1, g1), (k2, g2)):
            e = self.edges[k]
            dist[(k, g)] = {e.lower_vertex: abs(g - e.g_lo),
                            e.upper_vertex: abs(g - e.g_hi)}
        best = np.inf
        for va, ca in dist[(k1, g1)].items():
            for vb, cb in dist[(k2, g2)].items():
                best = min(best, ca + self._vertex_dist(va, vb) + cb)
        return best

    def _vertex_dist(self, va, vb):
        if va == vb:
            return 0.0
        # Dijkstra on the (small) vertex tree
        import heapq
        dist = {va: 0.0}
        heap = [(0.0, va)]
        while heap:
            d, v = heapq.heappop(heap)
            if v == vb:
                return d
            if d > dist.get(v, np.inf):
                continue
            for e in self.edges_at_vertex(v):
                w = e.g_hi - e.g_lo
                other = e.upper_vertex if e.lower_vertex == v else e.lower_vertex
                nd = d + w
                if nd < dist.get(other, np.inf):
                    dist[other] = nd
                    heapq.heappush(heap, (nd, other))
        return np.inf


def _descend_to_minimum(sys, x, minima, step=0.02, max_steps=4000):
    """Follow the tangential -grad G flow until a known minimum captures it."""
    if not minima:
        raise SlowfastError("no minima available for descent classification")
    x = project_to_surface(sys.F, sys.z, np.array(x, dtype=float))
    targets = np.array([m.x for m in minima])
    if len(minima) > 1:
        sep = min(np.linalg.norm(a.x - b.x) for i, a in enumerate(minima)
                  for b in minima[i + 1:])
        capture = min(0.25 * sep, 3.0 * step)
    else:
        capture = 3.0 * step
    for _ in range(max_steps):
        d = np.linalg.norm(targets - x, axis=-1)
        j = int(np.argmin(d))
        if d[j] < capture:
            return minima[j]
        gg = sys.G.gradient(x)
        gf = sys.F.gradient(x)
        n = gf / np.linalg.norm(gf)
        pt = gg - np.dot(gg, n) * n
        norm = np.linalg.norm(pt)
        if norm < 1e-12:
            return minima[j]
        x = project_to_surface(sys.F, sys.z, x - min(step, norm) * pt / norm)
    raise SlowfastError("descent did not reach a minimum")


def build_reeb_graph(sys: SurfaceSystem, critical_points=None, n_starts=400, seed=0,
                     level_tol=1e-9):
    """Quotient {F=z, G <= G(x0)+1} by connected level-set components.

    Ascending merge sweep: every minimum opens an edge, every saddle closes
    the two edges whose basins its downhill separatrices reach and opens the
    merged edge, the boundary level closes the last one at the vertex P.
    Well edges take odd ids ordered by descending x1 of their minimum (the
    mirror-symmetric canonical system then gets the conventional 1/3 pair);
    merged edges take even ids by ascending saddle level.
    """
    crit = critical_points if critical_points is not None else find_critical_points(
        sys, n_starts=n_starts, seed=seed)
    boundary_g = float(sys.G.value(np.asarray(sys.x0, float))) + 1.0
    inside = [c for c in crit if c.g < boundary_g - 1e-12]
    outside = [c for c in crit if c.g >= boundary_g - 1e-12]
    if any(c.kind == "max" for c in inside):
        raise SlowfastError("a maximum below the boundary level is not supported")
    if any(c.kind != "max" for c in outside):
        raise SlowfastError("minima/saddles above the boundary level are not supported")
    minima = [c for c in inside if c.kind == "min"]
    saddle_list = sorted([c for c in inside if c.kind == "saddle"], key=lambda c: c.g)
    sg = [c.g for c in saddle_list]
    for a, b in zip(sg, sg[1:]):
        if b - a < level_tol:
            raise NonGenericLevelsError(f"saddle levels {a} and {b} coincide")

    vertices = []
    edges = []
    vid = 0
    # leaf vertices and well edges (ids assigned afterwards)
    minima_sorted = sorted(minima, key=lambda c: (-c.x[0], -c.x[1], -c.x[2]))
    open_edges = {}              # component root (minimum index) -> working edge record
    parent = {}                  # union-find over minima indices

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    min_index = {}
    for i, m in enumerate(minima_sorted):
        v = ReebVertex(id=vid, kind="extremum", g=m.g, point=m.x, critical_point=m)
        vertices.append(v)
        vid += 1
        parent[i] = i
        min_index[id(m)] = i
        anchor = _well_anchor(sys, m)
        open_edges[i] = {"g_lo": m.g, "lower": v.id, "anchor": anchor, "minimum": m,
                         "is_well": True}

    even_edges = []
    odd_edges = []
    for s in saddle_list:
        v = ReebVertex(id=vid, kind="saddle", g=s.g, point=s.x, critical_point=s)
        vertices.append(v)
        vid += 1
        m_a, m_b = _saddle_basins(sys, s, minima_sorted)
        ra, rb = find(min_index[id(m_a)]), find(min_index[id(m_b)])
        if ra == rb:
            raise SlowfastError("saddle joins a component to itself (non-tree topology)")
        for r in (ra, rb):
            rec = open_edges.pop(r)
            e = ReebEdge(id=-1, g_lo=rec["g_lo"], g_hi=s.g, lower_vertex=rec["lower"],
                         upper_vertex=v.id, anchor=rec["anchor"], minimum=rec.get("minimum"))
            (odd_edges if rec["is_well"] else even_edges).append(e)
        parent[rb] = ra
        anchor = _saddle_upper_anchor(sys, s)
        open_edges[ra] = {"g_lo": s.g, "lower": v.id, "anchor": anchor, "is_well": False,
                          "minimum": None}

    if len(open_edges) != 1:
        raise SlowfastError("surface region is not connected at the boundary level")
    p_vertex = ReebVertex(id=vid, kind="boundary-P", g=boundary_g, point=None)
    vertices.append(p_vertex)
    rec = open_edges.popitem()[1]
    e = ReebEdge(id=-1, g_lo=rec["g_lo"], g_hi=boundary_g, lower_vertex=rec["lower"],
                 upper_vertex=p_vertex.id, anchor=rec["anchor"], minimum=rec.get("minimum"))
    (odd_edges if rec["is_well"] else even_edges).append(e)

    # id assignment: wells odd in the minima order, merged edges even by level
    odd_edges.sort(key=lambda e: (-e.minimum.x[0], -e.minimum.x[1], -e.minimum.x[2]))
    for i, e in enumerate(odd_edges):
        e.id = 2 * i + 1
    even_edges.sort(key=lambda e: e.g_lo)
    for i, e in enumerate(even_edges):
        e.id = 2 * (i + 1)
    all_edges = odd_edges + even_edges
    return ReebGraph(vertices, all_edges, sys, saddle_list, boundary_g)


def _well_anchor(sys, minimum, offset=2e-3):
    """A point just above the minimum, inside its well."""
    Ht, (e1, e2) = tangential_hessian(sys, minimum.x, minimum.lagrange)
    w, V = np.linalg.eigh(Ht)
    d = V[:, 0]
    direction = d[0] * e1 + d[1] * e2
    return project_to_surface(sys.F, sys.z, minimum.x + offset * direction)


def _saddle_upper_anchor(sys, saddle, offset=2e-3):
    """A point just above the saddle level on the merged (outer) component."""
    Ht, (e1, e2) = tangential_hessian(sys, saddle.x, saddle.lagrange)
    w, V = np.linalg.eigh(Ht)
    d = V[:, int(np.argmax(w))]          # uphill direction
    direction = d[0] * e1 + d[1] * e2
    return project_to_surface(sys.F, sys.z, saddle.x + offset * direction)


def _saddle_basins(sys, saddle, minima, offset=1e-3):
    """The two minima reached by the saddle's downhill separatrices."""
    Ht, (e1, e2) = tangential_hessian(sys, saddle.x, saddle.lagrange)
    w, V = np.linalg.eigh(Ht)
    d = V[:, int(np.argmin(w))]          # downhill direction
    direction = d[0] * e1 + d[1] * e2
    xa = project_to_surface(sys.F, sys.z, saddle.x + offset * direction)
    xb = project_to_surface(sys.F, sys.z, saddle.x - offset * direction)
    m_a = _descend_to_minimum(sys, xa, minima)
    m_b = _descend_to_minimum(sys, xb, minima)
    if m_a is m_b:
        raise SlowfastError("both separatrices descend to the same minimum")
    return m_a, m_b


def classify_point(sys: SurfaceSystem, graph: ReebGraph, x, margin=1e-6):
    """Graph coordinates (edge id, g) of a surface point.

    Points within ``margin`` of a saddle level are refused.  The owning well
    is found by descending the tangential gradient flow to a minimum, then
    walking up the merge tree until the edge whose range contains g.
    """
    x = np.asarray(x, dtype=float)
    g = float(sys.G.value(x))
    for s in graph.saddles:
        if abs(g - s.g) < margin:
            raise SeparatrixAmbiguityError(f"G(x)={g} within {margin} of saddle level {s.g}")
    if g >= graph.boundary_g:
        from .errors import EdgeRangeError
        raise EdgeRangeError(f"G(x)={g} beyond the boundary level {graph.boundary_g}")
    fam = sys.meta.get("family")
    if fam == "canonical-sphere" and graph.saddles:
        sad = graph.saddles[0]
        if g > sad.g:
            k = _top_edge(graph).id
            return k, g
        side_edges = [e for e in graph.well_edges]
        pick = max(side_edges, key=lambda e: np.sign(x[0] - sad.x[0]) * e.minimum.x[0])
        return pick.id, g
    minima = [e.minimum for e in graph.well_edges]
    m = _descend_to_minimum(sys, x, minima)
    e = next(e for e in graph.well_edges if e.minimum is m)
    while not e.contains(g, closed=False):
        v = e.upper_vertex
        ups = [e2 for e2 in graph.edges.values() if e2.lower_vertex == v]
        if not ups:
            from .errors import EdgeRangeError
            raise EdgeRangeError(f"no edge contains g={g} above vertex {v}")
        e = ups[0]
    return e.id, g


def _top_edge(graph):
    return next(e for e in graph.edges.values()
                if graph.vertices[e.upper_vertex].kind == "boundary-P")


def condition_report(sys: SurfaceSystem, graph: ReebGraph, n_levels=8):
    """Non-degeneracy margins: smallest conservative speed along sampled
    curves per edge, and the tangential Hessian eigenvalue gaps."""
    report = {"edges": {}, "critical_points": []}
    for e in graph.edges.values():
        lo, hi = e.g_lo, e.g_hi
        pad = 0.05 * (hi - lo)
        min_speed = np.inf
        for g in np.linspace(lo + pad, hi - pad, n_levels):
            try:
                c = trace_level_curve(sys, g, graph.seed(e.id, g))
            except (CurveEscapeError, SlowfastError):
                continue
            min_speed = min(min_speed, float(np.min(c.speeds)))
        report["edges"][e.id] = {"min_speed": min_speed}
    for v in graph.vertices.values():
        if v.critical_point is not None:
            report["critical_points"].append({
                "kind": v.kind, "g": v.g,
                "eig_gap": float(np.min(np.abs(v.critical_point.tangential_eigs)))})
    return report


def export_curves_csv(path, rows):
    """Write (edge id, g, T, functional...) rows; header from dict keys."""
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)
