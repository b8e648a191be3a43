#!/usr/bin/env python3
"""Monte Carlo vs the reduced theory, at demo scale: branching fractions of
the slow flow, ribbon widths on a transversal, graph-diffusion exits at the
saddle, and the escape-time trend.  The acceptance suite runs the same
experiments at their full statistical scale.
"""

from slowfast import experiments as ex
from slowfast import graphproc as gp

print("=== branching fractions of the deterministic slow flow ===")
cfg = ex.ExperimentConfig(kind="branching", n_runs=400, eps_list=(2e-3,),
                          delta_list=(0.05,), beta=0.1, seed=1)
print(ex.run_branching_experiment(cfg).to_text())

print("\n=== capture-band widths on a transversal through the base point ===")
cfg = ex.ExperimentConfig(kind="ribbon", n_runs=1, eps_list=(4e-3, 2e-3),
                          delta_list=(0.0,), beta=0.1, seed=1,
                          params={"bisect_rounds": 16})
print(ex.run_ribbon_experiment(cfg).to_text())

print("\n=== graph diffusion: saddle exits against the gluing ratios ===")
ctx = ex.get_context(beta=0.1)
freqs, n = gp.collect_vertex_exits(ctx.coeffs, ctx.saddle, delta=0.3,
                                   n_passages=3000, master_seed=1)
print(f"{n} vertex passages; empirical exit shares "
      f"{ {k: round(v, 3) for k, v in freqs.items()} } "
      f"vs weights { {k: round(v, 3) for k, v in ctx.saddle.q.items()} }")

print("\n=== escape-time trend toward the smaller threshold ===")
rows = gp.transition_time_stats(ctx.coeffs, ctx.saddle, (0.5, 0.4, 0.3),
                                start_well=3, n_runs=400, master_seed=1)
for r in rows:
    print(f"  delta = {r['delta']}: mean transition {r['mean']:8.2f}, "
          f"delta^2 log(mean) = {r['d2_log_mean']:.4f}")
print(f"  smaller threshold for comparison: {ctx.thresholds.lambda3:.4f}")
