"""Command-line interface.

    slowfast simulate   --config c.toml --kind slow --t-end 2.0 --out DIR
    slowfast coeffs     --config c.toml --out DIR
    slowfast metastable --config c.toml --out DIR
    slowfast graphsim   --config c.toml --delta 0.3 --runs 100 --out DIR
    slowfast torus      {invariant-check|rates|limit-sim|sde-sim} --out DIR
    slowfast experiment {branching|ribbon|sde-branching|metastability|rotation}
                        --runs N --eps LIST --delta LIST --seed N --out DIR
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys as _sys

import numpy as np


def _add_common(p):
    p.add_argument("--config", default=None, help="TOML system definition")
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--out", default="out", help="output directory")


def _load_system(args):
    from .config import load_config, build_system
    from .fields import canonical_sphere_system
    if args.config:
        return build_system(load_config(args.config))
    return canonical_sphere_system()


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def main(argv=None):
    ap = argparse.ArgumentParser(prog="slowfast",
                                 description="slow-fast dynamics on level surfaces")
    sub = ap.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="integrate one trajectory, stream records")
    _add_common(p_sim)
    p_sim.add_argument("--kind", choices=["unperturbed", "slow", "sde"], default="slow")
    p_sim.add_argument("--t-end", type=float, default=1.0)
    p_sim.add_argument("--step", type=float, default=None)
    p_sim.add_argument("--downsample", type=int, default=1)

    p_co = sub.add_parser("coeffs", help="edge coefficient and saddle tables as CSV")
    _add_common(p_co)
    p_co.add_argument("--n-grid", type=int, default=33)

    p_ms = sub.add_parser("metastable", help="threshold report as JSON/text")
    _add_common(p_ms)

    p_gs = sub.add_parser("graphsim", help="graph-diffusion paths as CSV")
    _add_common(p_gs)
    p_gs.add_argument("--delta", type=float, default=0.3)
    p_gs.add_argument("--h-vertex", type=float, default=0.01)
    p_gs.add_argument("--runs", type=int, default=10)
    p_gs.add_argument("--t-end", type=float, default=20.0)

    p_to = sub.add_parser("torus", help="genus-one experiments")
    _add_common(p_to)
    p_to.add_argument("action", choices=["invariant-check", "rates", "limit-sim", "sde-sim"])
    p_to.add_argument("--t-end", type=float, default=None)
    p_to.add_argument("--runs", type=int, default=200)

    p_ex = sub.add_parser("experiment", help="Monte Carlo experiment suites")
    _add_common(p_ex)
    p_ex.add_argument("kind", choices=["branching", "ribbon", "sde-branching",
                                       "metastability", "rotation"])
    p_ex.add_argument("--runs", type=int, default=None)
    p_ex.add_argument("--eps", type=_floats, default=None)
    p_ex.add_argument("--delta", type=_floats, default=None)
    p_ex.add_argument("--beta", type=float, default=None)

    args = ap.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    return _dispatch(args)


def _dispatch(args):
    if args.command == "simulate":
        return _cmd_simulate(args)
    if args.command == "coeffs":
        return _cmd_coeffs(args)
    if args.command == "metastable":
        return _cmd_metastable(args)
    if args.command == "graphsim":
        return _cmd_graphsim(args)
    if args.command == "torus":
        return _cmd_torus(args)
    if args.command == "experiment":
        return _cmd_experiment(args)
    raise SystemExit(2)


def _cmd_simulate(args):
    from .integrate import IntegratorConfig, integrate_unperturbed, integrate_slow, integrate_sde
    sys_ = _load_system(args)
    h = args.step
    if h is None:
        h = 1e-3 if args.kind == "unperturbed" else 0.05 * sys_.epsilon
    method = "heun-stratonovich" if args.kind == "sde" else "rk4-projected"
    cfg = IntegratorConfig(h=h, method=method, seed=args.seed,
                           record_every=args.downsample)
    fn = {"unperturbed": integrate_unperturbed, "slow": integrate_slow,
          "sde": integrate_sde}[args.kind]
    traj = fn(sys_, sys_.x0, args.t_end, cfg)
    path = os.path.join(args.out, f"trajectory_{args.kind}.jsonl")
    traj.write_records(path, downsample=1)
    print(f"wrote {len(traj.t)} records to {path}")
    return 0


def _cmd_coeffs(args):
    from .levelsets import build_reeb_graph
    from .averaging import coefficient_set, saddle_data, export_tables_csv
    sys_ = _load_system(args)
    graph = build_reeb_graph(sys_)
    coeffs = coefficient_set(sys_, graph, n=args.n_grid)
    path = os.path.join(args.out, "edge_coefficients.csv")
    export_tables_csv(path, coeffs)
    sd = saddle_data(sys_, graph)
    spath = os.path.join(args.out, "saddle.csv")
    with open(spath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "edge", "value"])
        for k, v in sd.beta.items():
            w.writerow(["beta", k, v])
        for k, v in sd.q.items():
            w.writerow(["q", k, v])
        w.writerow(["p1", sd.well_edge_ids[0], sd.p1])
        w.writerow(["p3", sd.well_edge_ids[1], sd.p3])
        w.writerow(["route_rel_diff", "", sd.route_rel_diff])
        w.writerow(["beta_additivity_rel", "", sd.beta_additivity_rel])
    print(f"wrote {path} and {spath}")
    return 0


def _cmd_metastable(args):
    from .levelsets import build_reeb_graph
    from .averaging import metastable_thresholds
    sys_ = _load_system(args)
    graph = build_reeb_graph(sys_)
    rep = metastable_thresholds(sys_, graph)
    path = os.path.join(args.out, "metastable_report.json")
    with open(path, "w") as fh:
        fh.write(rep.to_json())
    print(rep.to_json())
    print(f"wrote {path}")
    return 0


def _cmd_graphsim(args):
    from .levelsets import build_reeb_graph
    from .averaging import coefficient_set, saddle_data
    from .graphproc import simulate_graph_diffusion
    sys_ = _load_system(args)
    graph = build_reeb_graph(sys_)
    coeffs = coefficient_set(sys_, graph)
    sd = saddle_data(sys_, graph)
    path = os.path.join(args.out, "graph_paths.csv")
    e_up = graph.edge(sd.upper_edge_id)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "t", "edge", "g"])
        for run in range(args.runs):
            gp = simulate_graph_diffusion(coeffs, sd, args.delta,
                                          (sd.upper_edge_id, 0.5 * (e_up.g_lo + e_up.g_hi)),
                                          args.t_end, rng_seed=args.seed + run,
                                          h_vertex=args.h_vertex)
            for t, k, g in zip(gp.times, gp.edges, gp.gs):
                w.writerow([run, t, k, g])
    print(f"wrote {path}")
    return 0


def _cmd_torus(args):
    from .config import load_config, build_torus_system
    from . import torus as tor
    if args.config:
        tsys = build_torus_system(load_config(args.config))
    else:
        tsys = tor.canonical_torus_system()
    if args.action == "invariant-check":
        chk = tor.invariant_measure_check(tsys, t_end=args.t_end or 400.0, seed=args.seed)
        out = {"chi2": chk.chi2, "dof": chk.dof, "p_value": chk.p_value,
               "n_samples": chk.n_samples, "n_cells": chk.n_cells}
        print(json.dumps(out, indent=2))
        with open(os.path.join(args.out, "invariant_check.json"), "w") as fh:
            json.dump(out, fh, indent=2)
        return 0
    rg = tor.torus_rates(tsys)
    if args.action == "rates":
        path = os.path.join(args.out, "torus_rates.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["well", "psi_bar", "s", "rate", "beta", "h_center", "is_max"])
            for k, e in rg.edges.items():
                w.writerow([k, e.psi_bar, e.s, e.rate, e.beta, e.h_center, e.center_is_max])
            w.writerow(["lambda_erg", rg.lambda_erg, "", "", "", "", ""])
        print(f"wrote {path}; lambda_erg={rg.lambda_erg:.6g}, "
              f"total rate={rg.total_rate:.6g}")
        return 0
    if args.action == "limit-sim":
        rng = np.random.default_rng(args.seed)
        path = os.path.join(args.out, "torus_limit_paths.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "t", "edge", "h"])
            for run in range(args.runs):
                gp = tor.simulate_torus_limit(rg, (0, 0.0), args.t_end or 100.0, rng)
                for t, k, h in zip(gp.times, gp.edges, gp.gs):
                    w.writerow([run, t, k, h])
        print(f"wrote {path}")
        return 0
    if args.action == "sde-sim":
        traj, gp = tor.simulate_torus_sde(tsys, tsys.x0, args.t_end or 20.0,
                                          h=5e-5, master_seed=args.seed)
        path = os.path.join(args.out, "torus_sde_projection.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "edge", "h", "x1", "x2", "x3"])
            for i in range(len(gp.times)):
                w.writerow([gp.times[i], gp.edges[i], gp.gs[i],
                            traj.x[i][0], traj.x[i][1], traj.x[i][2]])
        print(f"wrote {path}")
        return 0
    raise SystemExit(2)


def _cmd_experiment(args):
    from . import experiments as ex
    defaults = {
        "branching": dict(n_runs=2000, eps_list=(1e-3,), delta_list=(0.05,), beta=0.0),
        "ribbon": dict(n_runs=1, eps_list=(4e-3, 2e-3, 1e-3), delta_list=(0.0,), beta=0.1),
        "sde-branching": dict(n_runs=1000, eps_list=(1e-4,), delta_list=(0.2,), beta=0.1),
        "metastability": dict(n_runs=200, eps_list=(1e-3,), delta_list=(0.35,), beta=0.5),
        "rotation": dict(n_runs=1, eps_list=(1e-3, 3e-4, 1e-4), delta_list=(0.0,), beta=0.0),
    }
    kw = defaults[args.kind]
    if args.runs is not None:
        kw["n_runs"] = args.runs
    if args.eps is not None:
        kw["eps_list"] = args.eps
    if args.delta is not None:
        kw["delta_list"] = args.delta
    if args.beta is not None:
        kw["beta"] = args.beta
    cfg = ex.ExperimentConfig(kind=args.kind, seed=args.seed, out_dir=args.out, **kw)
    runner = {
        "branching": ex.run_branching_experiment,
        "ribbon": ex.run_ribbon_experiment,
        "sde-branching": ex.run_sde_branching_experiment,
        "metastability": ex.run_metastability_experiment,
        "rotation": ex.run_rotation_diagnostics,
    }[args.kind]
    rep = runner(cfg)
    print(rep.to_text())
    return 0 if rep.all_passed else 1


if __name__ == "__main__":
    _sys.exit(main())
