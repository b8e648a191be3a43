#!/usr/bin/env python3
"""Tour of the basic geometry: the canonical sphere system, its critical
points, the quotient graph, and a few traced level curves with their
periods.  Prints tables; no plotting dependencies.
"""

import numpy as np

from slowfast import fields as fl
from slowfast import levelsets as lv

sys_ = fl.canonical_sphere_system()
print("system:", sys_.name)
print("base point x0 =", sys_.x0, " G(x0) =", float(sys_.G.value(sys_.x0)))

print("\npointwise identities at x = (0, 1, 0):")
x = np.array([0.0, 1.0, 0.0])
print("  conservative drive  grad F x grad G =", fl.fast_field(sys_, x))
print("  damping drift       gF x (gF x b)  =", fl.damping_field(sys_, x))
print("  noise contraction   Sigma          =", fl.ito_correction(sys_, x))

print("\ncritical points of G on {F = 1/2}:")
crit = lv.find_critical_points(sys_)
for c in crit:
    print(f"  {c.kind:<7} at {np.round(c.x, 4)}  g = {c.g:+.4f}  "
          f"tangential eigenvalues {np.round(c.tangential_eigs, 3)}")

graph = lv.build_reeb_graph(sys_, critical_points=crit)
print("\nquotient graph (edges as level ranges):")
for e in sorted(graph.edges.values(), key=lambda e: e.id):
    role = "well" if e.minimum is not None else "outer"
    print(f"  edge {e.id} ({role}): g in [{e.g_lo:+.4f}, {e.g_hi:+.4f}]")
for v in graph.vertices.values():
    print(f"  vertex {v.id}: {v.kind} at g = {v.g:+.4f}")

print("\ntraced level curves (period of one rotation of the drive):")
for k, g in ((2, 1.0), (2, 0.5), (2, 0.05), (1, -0.1), (3, -0.1), (1, -0.24)):
    c = lv.trace_level_curve(sys_, g, graph.seed(k, g))
    print(f"  edge {k}, g = {g:+.3f}: {len(c.points):4d} points, "
          f"length {c.length:6.3f}, period T = {c.period:8.4f}")

m = graph.edge(1).minimum
print(f"\nlinearized period at the minimum: {lv.linearized_period(sys_, m):.4f}"
      "  (the traced periods approach it as g drops to the bottom)")
print("periods grow like |log g| toward the homoclinic level:")
for g in (1e-2, 1e-3, 1e-4):
    c = lv.trace_level_curve(sys_, g, graph.seed(2, g))
    print(f"  g = {g:7.0e}: T = {c.period:8.4f}")
