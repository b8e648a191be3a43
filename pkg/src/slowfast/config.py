"""Human-editable system definitions.

TOML files with nested sections describe a problem instance:

    [fields]
    F = "sphere"              # or an expression in x1, x2, x3
    G = "double-well"         # "height", or an expression
    beta = 0.1                # asymmetry of the built-in double well

    [perturbation]
    kind = "gradient-of-G"    # damping form b = grad G
    # kind = "expression", components = ["-x2", "x1", "0"], form = "cross"

    [noise]
    kind = "tangent-projection"   # or "none"
    scale = 1.0

    [parameters]
    z = 0.5
    x0 = [0.0, 0.8660254037844386, -0.5]
    epsilon = 1e-3
    delta = 0.0

A ``[torus]`` section instead selects the genus-one family (see
``canonical_torus_system`` for the keys, all optional).

Expression fields use python/numpy syntax ('^' is accepted for powers) in
the variables x1, x2, x3 with the usual math functions; their derivatives
are centered finite differences with step 1e-5.
"""

from __future__ import annotations

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # python < 3.11
    import tomli as tomllib

from .errors import SlowfastError
from .fields import (SurfaceSystem, smooth_field, gradient_field, explicit_field,
                     tangent_projection_noise, sphere_field, saddle_energy_field,
                     height_field, canonical_sphere_system)

_EXPR_NS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "atan2": np.arctan2, "abs": np.abs, "pi": np.pi,
    "hypot": np.hypot, "tanh": np.tanh,
}


def expression_scalar_field(expr, name=""):
    code = compile(expr.replace("^", "**"), "<field-expr>", "eval")

    def value(x):
        x = np.asarray(x, float)
        ns = dict(_EXPR_NS)
        ns.update(x1=x[..., 0], x2=x[..., 1], x3=x[..., 2])
        out = eval(code, {"__builtins__": {}}, ns)
        return np.broadcast_to(np.asarray(out, float), x.shape[:-1]).copy()

    return smooth_field(value, name=name or expr)


def expression_vector_field(components, name=""):
    fields = [expression_scalar_field(c) for c in components]

    def func(x):
        x = np.asarray(x, float)
        return np.stack([f.value(x) for f in fields], axis=-1)

    return explicit_field(func, name=name or str(components))


def load_config(path):
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _scalar_field_from(spec, beta):
    if spec in ("sphere", "half-square-norm"):
        return sphere_field()
    if spec in ("double-well", "canonical"):
        return saddle_energy_field(beta)
    if spec == "height":
        return height_field()
    return expression_scalar_field(spec)


def build_surface_system(cfg) -> SurfaceSystem:
    f_cfg = cfg.get("fields", {})
    beta = float(f_cfg.get("beta", 0.0))
    params = cfg.get("parameters", {})
    noise_cfg = cfg.get("noise", {})
    pert_cfg = cfg.get("perturbation", {})

    if (f_cfg.get("F", "sphere") == "sphere"
            and f_cfg.get("G", "double-well") in ("double-well", "canonical")
            and pert_cfg.get("kind", "gradient-of-G") == "gradient-of-G"):
        return canonical_sphere_system(
            beta=beta,
            epsilon=float(params.get("epsilon", 1e-3)),
            delta=float(params.get("delta", 0.0)),
            noise=(noise_cfg.get("kind", "tangent-projection")
                   if noise_cfg.get("kind", "tangent-projection") != "none" else None),
            noise_scale=float(noise_cfg.get("scale", 1.0)),
            x0=params.get("x0"),
        )

    F = _scalar_field_from(f_cfg.get("F", "sphere"), beta)
    G = _scalar_field_from(f_cfg.get("G", "double-well"), beta)
    kind = pert_cfg.get("kind", "gradient-of-G")
    form = pert_cfg.get("form", "b")
    if kind == "gradient-of-G":
        pert = gradient_field(G)
    elif kind == "expression":
        pert = expression_vector_field(pert_cfg["components"])
    else:
        raise SlowfastError(f"unknown perturbation kind {kind!r}")
    nm = None
    if noise_cfg.get("kind", "none") == "tangent-projection":
        nm = tangent_projection_noise(F, scale=float(noise_cfg.get("scale", 1.0)))
    if "x0" not in params:
        raise SlowfastError("parameters.x0 is required for non-canonical fields")
    return SurfaceSystem(
        F=F, G=G, perturbation=pert, z=float(params.get("z", 0.5)),
        x0=np.asarray(params["x0"], float),
        epsilon=float(params.get("epsilon", 1e-3)),
        delta=float(params.get("delta", 0.0)),
        noise=nm, perturbation_form=form,
        name=cfg.get("name", "custom"),
        meta={"family": "custom",
              "F": str(f_cfg.get("F")), "G": str(f_cfg.get("G")), "beta": beta,
              "perturbation": str(kind), "noise": noise_cfg.get("kind", "none"),
              "noise_scale": float(noise_cfg.get("scale", 1.0))},
    )


def build_torus_system(cfg):
    from .torus import canonical_torus_system
    t = cfg.get("torus", {})
    kwargs = {}
    for key in ("alpha", "gamma", "amplitude", "concentration", "R", "z",
                "epsilon", "delta", "noise_scale"):
        if key in t:
            kwargs[key] = float(t[key])
    if "p_axis" in t:
        kwargs["p_axis"] = tuple(float(v) for v in t["p_axis"])
    return canonical_torus_system(**kwargs)


def build_system(cfg):
    if "torus" in cfg:
        return build_torus_system(cfg)
    return build_surface_system(cfg)
