"""Stochastic processes on the quotient graph.

Two reduced descriptions of the slow motion live here: the zero-noise limit
(deterministic drift inside edges, instantaneous Bernoulli branching at the
saddle vertex) and the small-noise graph diffusion (drift and diffusion from
the tabulated edge coefficients, vertex behavior from the gluing weights).

Vertex rule: a walker entering the radius-h neighborhood of the saddle is
redirected to incident edge i with probability beta_i / sum(beta) and
continues from the neighborhood boundary on that edge.  The exit law of the
underlying diffusion from a shrinking neighborhood has exactly these
weights; the boundary-value-problem solution that proves it is kept as
``exit_probabilities_bvp`` and used as a test oracle.

Exterior extremum vertices are entrance-inaccessible: drift and diffusion
vanish toward the tips (tabulated that way) and steps are reflected there.
The boundary vertex absorbs by default; the policy sits behind one switch.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .errors import SlowfastError, StepResolutionError
from .averaging import CoefficientSet, SaddleData, solve_slow_ode
from .integrate import trajectory_rng


@dataclass
class GraphState:
    edge: Optional[int]
    g: Optional[float]
    vertex: Optional[int]
    time: float
    stopped: bool = False


@dataclass
class GraphPath:
    times: np.ndarray
    edges: np.ndarray
    gs: np.ndarray
    branching_log: list = dc_field(default_factory=list)   # (t, vertex label, edge)
    stopped_at_boundary: bool = False

    def state_of_t(self, t):
        i = int(np.clip(np.searchsorted(self.times, t, side="right") - 1,
                        0, len(self.times) - 1))
        return int(self.edges[i]), float(np.interp(t, self.times, self.gs))


# ---------------------------------------------------------------------------
# zero-noise limit: deterministic flow + Bernoulli branching

def simulate_limit_process(sys, graph, saddle: SaddleData, start, t_end, rng, n_quad=28):
    """Deterministic slow flow with an instantaneous (p1, p3) branch at the
    saddle vertex; spends time zero at the vertex; stopped at the boundary."""
    k1, k3 = saddle.well_edge_ids
    chosen = k1 if rng.random() < saddle.p1 else k3
    path = solve_slow_ode(sys, graph, start, t_end, well_choice=chosen, n=n_quad)
    log = []
    if path.tau0 is not None and path.tau0 <= t_end:
        log.append((path.tau0, "saddle", chosen))
    return GraphPath(times=path.times, edges=path.edge_ids.astype(int),
                     gs=path.gs, branching_log=log)


# ---------------------------------------------------------------------------
# graph diffusion engine

class _GaussChunks:
    def __init__(self, master_seed, n, chunk=512):
        self.chunk = int(chunk)
        self._rngs = [trajectory_rng(master_seed, i) for i in range(n)]
        self._buf = None
        self._pos = 0

    def next(self):
        if self._buf is None or self._pos >= self.chunk:
            self._buf = np.stack([r.standard_normal(self.chunk) for r in self._rngs], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


class GraphDiffusion:
    """Euler-Maruyama walkers on the edge tables with the gluing vertex rule.

    The step is delta^2-scaled and distance-adaptive: the diffusive move per
    step stays a fixed fraction of the distance to the saddle vertex (but at
    least of the neighborhood radius h), so the neighborhood is never hopped
    in one step.
    """

    def __init__(self, coeffs: CoefficientSet, saddle: SaddleData, delta,
                 h_vertex=0.01, dt_scale=0.02, dt_max=5e-3, absorb_at_boundary=True):
        self.coeffs = coeffs
        self.saddle = saddle
        self.delta = float(delta)
        self.h = float(h_vertex)
        self.dt_scale = float(dt_scale)
        self.dt_max = float(dt_max)
        self.absorb = absorb_at_boundary
        self.g_s = saddle.saddle_g
        ids = sorted(coeffs.tables)
        self.edge_ids = ids
        self.incident = list(saddle.well_edge_ids) + [saddle.upper_edge_id]
        q = np.array([saddle.q[k] for k in self.incident])
        self.q_cum = np.cumsum(q / q.sum())
        self.passage_exits = {k: 0 for k in self.incident}
        self.n_passages = 0
        self._span_min = min(t.g_hi - t.g_lo for t in coeffs.tables.values())
        # a 6-sigma diffusive move must stay below half its own edge's span
        self._dt_cap = {}
        for k, t in coeffs.tables.items():
            s2 = float(np.max(t.diffusion_sq(t.g, self.delta))) if self.delta else 0.0
            span = t.g_hi - t.g_lo
            self._dt_cap[k] = (span / 12.0) ** 2 / s2 if s2 > 0 else self.dt_max

    def _redirect(self, u):
        """Map uniforms to exit edges by the beta ratios."""
        idx = np.searchsorted(self.q_cum, u, side="right")
        idx = np.clip(idx, 0, len(self.incident) - 1)
        return np.array([self.incident[i] for i in idx])

    def run(self, edge0, g0, t_end, master_seed=0, n_walkers=1,
            monitor=None, record=None, max_steps=None):
        """Advance walkers until t_end, absorption, or monitor stop.

        ``monitor(t, edge, g, active)`` may return an updated active mask.
        ``record`` (single walker only): sample stride for path output.
        """
        n = int(n_walkers)
        edge = np.full(n, 0, dtype=int)
        edge[:] = np.asarray(edge0)
        g = np.full(n, 0.0)
        g[:] = np.asarray(g0)
        t = np.zeros(n)
        active = np.ones(n, dtype=bool)
        gauss = _GaussChunks(master_seed, n)
        uni = trajectory_rng(master_seed ^ 0x9E3779B97F4A7C15, 0)
        d2 = self.delta ** 2
        path = None
        if record is not None:
            if n != 1:
                raise SlowfastError("path recording supports a single walker")
            path = {"t": [0.0], "edge": [int(edge[0])], "g": [float(g[0])],
                    "log": []}
        stopped_at_boundary = np.zeros(n, dtype=bool)
        steps = 0
        while np.any(active):
            steps += 1
            if max_steps is not None and steps > max_steps:
                break
            xi = gauss.next()
            dt_edge = np.full(n, self.dt_max)
            mu = np.zeros(n)
            s2 = np.zeros(n)
            span_of = np.full(n, np.inf)
            for k in self.edge_ids:
                m = active & (edge == k)
                if not np.any(m):
                    continue
                tbl = self.coeffs.table(k)
                mu[m] = tbl.drift(g[m], self.delta)
                s2[m] = np.maximum(tbl.diffusion_sq(g[m], self.delta), 0.0)
                dt_edge[m] = min(self.dt_max, self._dt_cap[k])
                span_of[m] = tbl.g_hi - tbl.g_lo
            dist = np.maximum(np.abs(g - self.g_s), self.h)
            with np.errstate(divide="ignore", invalid="ignore"):
                dt_diff = self.dt_scale * dist**2 / np.where(s2 > 0, s2, np.inf)
                dt_drift = self.dt_scale * dist / np.maximum(np.abs(mu), 1e-12)
            dt = np.minimum(dt_edge, np.minimum(dt_diff, dt_drift))
            dt = np.where(active, dt, 0.0)
            step_g = mu * dt + np.sqrt(s2 * dt) * xi
            if np.any(np.abs(step_g[active]) > 0.5 * span_of[active]):
                raise StepResolutionError("an edge was crossed in one step; reduce dt_scale")
            g_prev = g.copy()
            g = g + np.where(active, step_g, 0.0)
            t = t + dt
            # tips and boundary
            for k in self.edge_ids:
                m = active & (edge == k)
                if not np.any(m):
                    continue
                tbl = self.coeffs.table(k)
                if tbl.lower_is_min:
                    over = m & (g < tbl.g_lo)
                    g[over] = 2.0 * tbl.g_lo - g[over]
                if tbl.upper_is_boundary:
                    over = m & (g > tbl.g_hi)
                    if self.absorb:
                        active = active & ~over
                        stopped_at_boundary |= over
                        if path is not None and np.any(over):
                            path["log"].append((float(t[0]), "boundary", None))
                    else:
                        g[over] = 2.0 * tbl.g_hi - g[over]
            # vertex neighborhood: entered the band, or stepped across it
            near = active & ((np.abs(g - self.g_s) < self.h)
                             | ((g_prev - self.g_s) * (g - self.g_s) < 0.0))
            if np.any(near):
                idx = np.nonzero(near)[0]
                u = uni.random(len(idx))
                exits = self._redirect(u)
                for j, w in enumerate(idx):
                    k_new = int(exits[j])
                    edge[w] = k_new
                    g[w] = self.g_s + (self.h if k_new == self.saddle.upper_edge_id
                                       else -self.h)
                    self.passage_exits[k_new] += 1
                    self.n_passages += 1
                    if path is not None:
                        path["log"].append((float(t[w]), "saddle", k_new))
            if monitor is not None:
                na = monitor(t, edge, g, active)
                if na is not None:
                    active = na
            if path is not None and steps % record == 0:
                path["t"].append(float(t[0]))
                path["edge"].append(int(edge[0]))
                path["g"].append(float(g[0]))
            if np.all(t >= t_end):
                break
            active = active & (t < t_end)
        result = {"t": t, "edge": edge, "g": g,
                  "stopped_at_boundary": stopped_at_boundary}
        if path is not None:
            result["path"] = GraphPath(times=np.array(path["t"]),
                                       edges=np.array(path["edge"]),
                                       gs=np.array(path["g"]),
                                       branching_log=path["log"],
                                       stopped_at_boundary=bool(stopped_at_boundary[0]))
        return result


def simulate_graph_diffusion(coeffs, saddle, delta, start, t_end, rng_seed=0,
                             h_vertex=0.01, dt_scale=0.02, dt_max=5e-3,
                             record_every=10, absorb_at_boundary=True) -> GraphPath:
    """One graph-diffusion walker with a recorded path."""
    eng = GraphDiffusion(coeffs, saddle, delta, h_vertex=h_vertex,
                         dt_scale=dt_scale, dt_max=dt_max,
                         absorb_at_boundary=absorb_at_boundary)
    k0, g0 = start
    out = eng.run(k0, g0, t_end, master_seed=rng_seed, n_walkers=1, record=record_every)
    return out["path"]


def collect_vertex_exits(coeffs, saddle, delta, n_passages, master_seed=0,
                         h_vertex=0.01, dt_scale=0.02, batch=512):
    """Empirical exit-edge frequencies over vertex passages.

    Walkers start just above the neighborhood on the upper edge, drift into
    it, get redirected, and are reset; each entry is one passage.
    """
    eng = GraphDiffusion(coeffs, saddle, delta, h_vertex=h_vertex, dt_scale=dt_scale)
    k_up = saddle.upper_edge_id
    g_start = saddle.saddle_g + 3.0 * h_vertex
    rounds = 0
    while eng.n_passages < n_passages and rounds < 200:
        rounds += 1

        def monitor(t, edge, g, active):
            # stop a walker as soon as it has been redirected away from the start leg
            moved = (edge != k_up) | (np.abs(g - saddle.saddle_g - h_vertex) < 1e-12)
            return active & ~moved

        eng.run(k_up, g_start, t_end=np.inf, master_seed=master_seed + rounds,
                n_walkers=batch, monitor=monitor, max_steps=100000)
    total = max(1, eng.n_passages)
    return {k: eng.passage_exits[k] / total for k in eng.passage_exits}, eng.n_passages


def exit_probabilities_bvp(betas, mu_funcs, s2_funcs, h, n_grid=4001):
    """Exit-edge probabilities of the graph diffusion started at the vertex.

    Unique continuous solution of L v = 0 on each incident leg with the flux
    matching condition at the vertex: on leg i (local coordinate r in [0,h],
    drift mu_i toward increasing r, squared diffusion s2_i), the harmonic
    solution is v(r) = v(0) + c_i S_i(r) with the scale function
    S_i(r) = int_0^r exp(-int_0^u 2 mu_i/s2_i) du, and the vertex condition
    sum_i beta_i c_i = 0.  Exit probability through leg j is then
    (beta_j / S_j(h)) / sum_i (beta_i / S_i(h)).
    """
    keys = list(betas)
    S = {}
    for k in keys:
        r = np.linspace(0.0, h, n_grid)
        mu = mu_funcs[k](r)
        s2 = s2_funcs[k](r)
        integrand = 2.0 * mu / s2
        inner = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1])
                                                 * np.diff(r))])
        e = np.exp(-inner)
        S[k] = float(np.sum(0.5 * (e[1:] + e[:-1]) * np.diff(r)))
    w = {k: betas[k] / S[k] for k in keys}
    tot = sum(w.values())
    return {k: w[k] / tot for k in keys}


# ---------------------------------------------------------------------------
# first-passage statistics

def transition_time_stats(coeffs, saddle, delta_list, start_well, n_runs,
                          master_seed=0, t_timeout=1e5, start_frac=0.85,
                          arrival_frac=0.5, h_vertex=0.01, dt_scale=0.02):
    """Mean first-passage times between the wells, per noise level.

    Walkers start deep in ``start_well`` and must reach the given depth in
    the other well.  Reports delta^2 ln(mean time) per delta; timeouts are
    censored and counted.
    """
    k1, k3 = saddle.well_edge_ids
    if start_well not in (k1, k3):
        raise SlowfastError(f"start well {start_well} not among {k1, k3}")
    other = k3 if start_well == k1 else k1
    g_s = saddle.saddle_g
    tbl_s = coeffs.table(start_well)
    tbl_o = coeffs.table(other)
    g_start = g_s - start_frac * (g_s - tbl_s.g_lo)
    g_arrive = g_s - arrival_frac * (g_s - tbl_o.g_lo)
    rows = []
    for i_d, delta in enumerate(delta_list):
        eng = GraphDiffusion(coeffs, saddle, delta, h_vertex=h_vertex,
                             dt_scale=dt_scale, absorb_at_boundary=False)
        arrived = np.zeros(n_runs, dtype=bool)
        t_hit = np.full(n_runs, np.nan)

        def monitor(t, edge, g, active):
            hit = active & (edge == other) & (g <= g_arrive)
            if np.any(hit):
                t_hit[hit] = t[hit]
                arrived[hit] = True
            return active & ~hit

        eng.run(start_well, g_start, t_end=t_timeout,
                master_seed=master_seed + 7919 * i_d, n_walkers=n_runs,
                monitor=monitor)
        ok = arrived
        tau = t_hit[ok]
        mean = float(np.mean(tau)) if len(tau) else np.nan
        rows.append({"delta": float(delta), "mean": mean,
                     "std": float(np.std(tau)) if len(tau) else np.nan,
                     "n": int(ok.sum()), "censored": int(n_runs - ok.sum()),
                     "d2_log_mean": float(delta**2 * np.log(mean)) if mean and np.isfinite(mean) else np.nan})
    return rows
