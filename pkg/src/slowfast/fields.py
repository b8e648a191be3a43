"""Scalar/vector field algebra on R^3 and the systems built from it.

Everything downstream consumes the handful of pointwise quantities defined
here: the conserved-surface field F, the energy G, the conservative drive
grad F x grad G, the damping drift grad F x (grad F x b), the noise map
sigma with its contraction vector, and the curl fields used by surface-flux
quadrature.

All field callables are vectorized: value maps (...,3) -> (...), gradient
maps (...,3) -> (...,3), hessian maps (...,3) -> (...,3,3).  Analytic
derivatives are used for the built-in systems; user-supplied expressions
fall back to centered finite differences (step 1e-5).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .errors import SlowfastError

FD_STEP = 1e-5


# ---------------------------------------------------------------------------
# finite-difference fallbacks

def fd_gradient(value, step=FD_STEP):
    def gradient(x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        for k in range(3):
            e = np.zeros(3)
            e[k] = step
            out[..., k] = (value(x + e) - value(x - e)) / (2.0 * step)
        return out
    return gradient


def fd_jacobian(func, step=FD_STEP):
    """Jacobian J[..., i, j] = d func_i / d x_j by centered differences."""
    def jacobian(x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (3,))
        for j in range(3):
            e = np.zeros(3)
            e[j] = step
            out[..., :, j] = (func(x + e) - func(x - e)) / (2.0 * step)
        return out
    return jacobian


def fd_hessian_from_gradient(gradient, step=FD_STEP):
    jac = fd_jacobian(gradient, step)

    def hessian(x):
        h = jac(x)
        return 0.5 * (h + np.swapaxes(h, -1, -2))
    return hessian


# ---------------------------------------------------------------------------
# field containers

@dataclass(frozen=True)
class SmoothField:
    """Scalar field with value, gradient and (symmetric) Hessian."""
    value: Callable
    gradient: Callable
    hessian: Callable
    name: str = ""


def smooth_field(value, gradient=None, hessian=None, name="", fd_step=FD_STEP):
    """Build a SmoothField, filling missing derivatives by finite differences.

    When the Hessian has to be differenced from an already-differenced
    gradient, the outer step is widened: stacking two centered differences
    at 1e-5 would put the rounding noise (machine eps / step^2) far above
    the truncation error.
    """
    grad_is_fd = gradient is None
    if gradient is None:
        gradient = fd_gradient(value, fd_step)
    if hessian is None:
        outer = max(fd_step, 2e-4) if grad_is_fd else fd_step
        hessian = fd_hessian_from_gradient(gradient, outer)
    return SmoothField(value=value, gradient=gradient, hessian=hessian, name=name)


@dataclass(frozen=True)
class VectorField:
    """Vector field with Jacobian; either explicit or the gradient of a scalar field."""
    func: Callable
    jacobian: Callable
    kind: str = "explicit"          # "explicit" | "gradient-of-field"
    potential: Optional[SmoothField] = None
    name: str = ""


def gradient_field(f: SmoothField, name=""):
    return VectorField(func=f.gradient, jacobian=f.hessian,
                       kind="gradient-of-field", potential=f,
                       name=name or (f.name and f"grad({f.name})"))


def explicit_field(func, jacobian=None, name="", fd_step=FD_STEP):
    if jacobian is None:
        jacobian = fd_jacobian(func, fd_step)
    return VectorField(func=func, jacobian=jacobian, kind="explicit", name=name)


@dataclass(frozen=True)
class NoiseMap:
    """Matrix noise map sigma with its derivative tensor d sigma_ij / d x_k.

    ``apply(x, w)`` computes sigma(x) @ w without materializing the matrix
    when a cheaper form is known (tangent projection).
    """
    sigma: Callable                  # (...,3) -> (...,3,3)
    dsigma: Callable                 # (...,3) -> (...,3,3,3)
    apply: Optional[Callable] = None
    name: str = ""

    def matvec(self, x, w):
        if self.apply is not None:
            return self.apply(x, w)
        return np.einsum("...ij,...j->...i", self.sigma(x), w)

    def diffusion_matrix(self, x):
        s = self.sigma(x)
        return np.einsum("...ij,...kj->...ik", s, s)


def tangent_projection_noise(F: SmoothField, scale=1.0):
    """sigma(x) = scale * (I - n n^T) with n = grad F / |grad F|.

    Annihilates grad F by construction and is uniformly elliptic on the
    tangent planes with constant scale^2.
    """
    s = float(scale)

    def unit_normal(x):
        g = F.gradient(x)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def sigma(x):
        n = unit_normal(x)
        eye = np.broadcast_to(np.eye(3), n.shape + (3,))
        return s * (eye - n[..., :, None] * n[..., None, :])

    def dsigma(x):
        g = F.gradient(x)
        h = F.hessian(x)
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        n = g / norm
        eye = np.broadcast_to(np.eye(3), n.shape + (3,))
        proj = eye - n[..., :, None] * n[..., None, :]
        # dn_i/dx_k = (P H)_ik / |grad F|
        dn = np.einsum("...im,...mk->...ik", proj, h) / norm[..., None]
        out = -(dn[..., :, None, :] * n[..., None, :, None]
                + n[..., :, None, None] * dn[..., None, :, :])
        return s * out

    def apply(x, w):
        n = unit_normal(x)
        return s * (w - n * np.sum(n * w, axis=-1, keepdims=True))

    return NoiseMap(sigma=sigma, dsigma=dsigma, apply=apply,
                    name=f"tangent-projection(scale={s})")


def constant_noise(matrix, name="constant"):
    mat = np.asarray(matrix, dtype=float)

    def sigma(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(mat, x.shape[:-1] + (3, 3)).copy()

    def dsigma(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (3, 3, 3))

    return NoiseMap(sigma=sigma, dsigma=dsigma, name=name)


# ---------------------------------------------------------------------------
# the problem instance

@dataclass(frozen=True)
class SurfaceSystem:
    """A full problem instance on the invariant surface {F = z}.

    ``perturbation_form`` selects how the slow drift is assembled:
      "b"     -> grad F x (grad F x b)   (damping form)
      "cross" -> grad F x b              (b already tangent-producing)
    """
    F: SmoothField
    G: SmoothField
    perturbation: VectorField
    z: float
    x0: np.ndarray
    epsilon: float
    delta: float = 0.0
    noise: Optional[NoiseMap] = None
    perturbation_form: str = "b"
    name: str = ""
    meta: dict = dc_field(default_factory=dict)

    def with_params(self, **kw):
        from dataclasses import replace
        return replace(self, **kw)


def fast_field(sys: SurfaceSystem, x):
    """Conservative drive grad F x grad G (zero at critical configurations)."""
    return np.cross(sys.F.gradient(x), sys.G.gradient(x))


def damping_field(sys: SurfaceSystem, x):
    """Damping drift grad F x (grad F x b); requires the b-form perturbation."""
    if sys.perturbation_form != "b":
        raise SlowfastError("damping_field requires a b-form perturbation")
    gf = sys.F.gradient(x)
    return np.cross(gf, np.cross(gf, sys.perturbation.func(x)))


def slow_drift(sys: SurfaceSystem, x):
    """The O(1) drift of the slow-time equation, in either perturbation form."""
    gf = sys.F.gradient(x)
    b = sys.perturbation.func(x)
    if sys.perturbation_form == "b":
        return np.cross(gf, np.cross(gf, b))
    return np.cross(gf, b)


def ito_correction(sys: SurfaceSystem, x):
    """Contraction Sigma_i = sum_{j,k} (d sigma_ij / d x_k) sigma_kj."""
    if sys.noise is None:
        raise SlowfastError("ito_correction requires a noise map")
    ds = sys.noise.dsigma(x)
    s = sys.noise.sigma(x)
    return np.einsum("...ijk,...kj->...i", ds, s)


def divergence_check(sys: SurfaceSystem, x, step=FD_STEP):
    """Centered-difference divergence of the conservative drive.

    The analytic value is identically zero; the returned number measures
    the numerical defect.  Callers compare |result| against 1e-8 * scale
    where scale is the local derivative magnitude (also returned).
    """
    x = np.asarray(x, dtype=float)
    div = np.zeros(x.shape[:-1])
    scale = np.ones(x.shape[:-1])
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        d = (fast_field(sys, x + e)[..., k] - fast_field(sys, x - e)[..., k]) / (2 * step)
        div = div + d
        scale = scale + np.abs(d)
    return div, scale


def curl_of_cross(F: SmoothField, w: VectorField, x):
    """curl(grad F x w) via the vector identity

        curl(A x B) = A div B - B div A + (B.grad)A - (A.grad)B

    with A = grad F (div A = lap F, (B.grad)A = Hess F @ B) and B = w.
    """
    gf = F.gradient(x)
    hf = F.hessian(x)
    wv = w.func(x)
    jw = w.jacobian(x)
    lap_f = np.trace(hf, axis1=-2, axis2=-1)
    div_w = np.trace(jw, axis1=-2, axis2=-1)
    term1 = gf * div_w[..., None]
    term2 = -wv * lap_f[..., None]
    term3 = np.einsum("...ij,...j->...i", hf, wv)
    term4 = -np.einsum("...ij,...j->...i", jw, gf)
    return term1 + term2 + term3 + term4


def unit_normal(sys: SurfaceSystem, x):
    g = sys.F.gradient(x)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def tangential_gradient(sys: SurfaceSystem, x):
    """grad G minus its normal component: sigma grad G for the unit projection."""
    n = unit_normal(sys, x)
    gg = sys.G.gradient(x)
    return gg - n * np.sum(n * gg, axis=-1, keepdims=True)


def validate_system(sys: SurfaceSystem, n_mesh=200, seed=0):
    """Check the construction invariants: F(x0) = z, grad F != 0 on a mesh."""
    x0 = np.asarray(sys.x0, dtype=float)
    if abs(float(sys.F.value(x0)) - sys.z) > 1e-10:
        raise SlowfastError(f"F(x0) != z: {float(sys.F.value(x0))} vs {sys.z}")
    rng = np.random.default_rng(seed)
    pts = surface_cloud(sys, n_mesh, rng)
    gn = np.linalg.norm(sys.F.gradient(pts), axis=-1)
    if np.any(gn < 1e-8):
        raise SlowfastError("grad F vanishes on the sampled surface mesh")
    return True


def project_to_surface(F: SmoothField, z, x, tol=1e-12, max_iter=60):
    """Newton steps x <- x - ((F-z)/|grad F|^2) grad F, batched."""
    from .errors import ProjectionError
    x = np.array(x, dtype=float)
    for _ in range(max_iter):
        r = F.value(x) - z
        if np.all(np.abs(r) <= tol):
            return x
        g = F.gradient(x)
        denom = np.sum(g * g, axis=-1)
        if np.any(denom < 1e-30):
            raise ProjectionError("grad F ~ 0 during projection")
        x = x - (r / denom)[..., None] * g
    raise ProjectionError(f"projection did not reach tol={tol}")


def surface_cloud(sys: SurfaceSystem, n, rng, spread=1.5):
    """Random points on {F=z}: Gaussian cloud around x0 projected onto the surface."""
    pts = np.asarray(sys.x0, float) + spread * rng.standard_normal((n, 3))
    return project_to_surface(sys.F, sys.z, pts)


# ---------------------------------------------------------------------------
# built-in systems

def sphere_field():
    """F(x) = |x|^2 / 2."""
    def value(x):
        x = np.asarray(x, float)
        return 0.5 * np.sum(x * x, axis=-1)

    def gradient(x):
        return np.asarray(x, float).copy()

    def hessian(x):
        x = np.asarray(x, float)
        return np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()

    return SmoothField(value, gradient, hessian, name="half-square-norm")


def saddle_energy_field(beta=0.0):
    """G(x) = x3 - x1^2 - beta*x1 + 1.

    On the unit sphere this is a Morse function with two minima, one saddle
    and one maximum; beta = 0 gives the x1 -> -x1 symmetric double well.
    """
    b = float(beta)

    def value(x):
        x = np.asarray(x, float)
        return x[..., 2] - x[..., 0] ** 2 - b * x[..., 0] + 1.0

    def gradient(x):
        x = np.asarray(x, float)
        out = np.zeros(x.shape)
        out[..., 0] = -2.0 * x[..., 0] - b
        out[..., 2] = 1.0
        return out

    def hessian(x):
        x = np.asarray(x, float)
        h = np.zeros(x.shape[:-1] + (3, 3))
        h[..., 0, 0] = -2.0
        return h

    return SmoothField(value, gradient, hessian, name=f"double-well(beta={b})")


def height_field():
    """G(x) = x3."""
    def value(x):
        return np.asarray(x, float)[..., 2]

    def gradient(x):
        x = np.asarray(x, float)
        out = np.zeros(x.shape)
        out[..., 2] = 1.0
        return out

    def hessian(x):
        x = np.asarray(x, float)
        return np.zeros(x.shape[:-1] + (3, 3))

    return SmoothField(value, gradient, hessian, name="height")


def canonical_sphere_system(beta=0.0, epsilon=1e-3, delta=0.0,
                            noise="tangent-projection", noise_scale=1.0,
                            x0=None):
    """The workhorse test system: unit sphere with a two-well energy.

    F = |x|^2/2 at level z = 1/2; G = x3 - x1^2 - beta*x1 + 1; b = grad G.
    With beta = 0 the minima sit at (+-sqrt(3)/2, 0, -1/2) on level -1/4,
    the saddle at (0,0,-1) on level 0 and the maximum at (0,0,1) on level 2.
    The base point (0, sqrt(3)/2, -1/2) has G = 1/2, so the working region
    is bounded by the regular level curve {G = 3/2}.
    """
    F = sphere_field()
    G = saddle_energy_field(beta)
    if x0 is None:
        x0 = np.array([0.0, np.sqrt(3.0) / 2.0, -0.5])
    nm = None
    if noise == "tangent-projection":
        nm = tangent_projection_noise(F, scale=noise_scale)
    elif noise is None or noise == "none":
        nm = None
    elif isinstance(noise, NoiseMap):
        nm = noise
    else:
        raise SlowfastError(f"unknown noise spec {noise!r}")
    return SurfaceSystem(
        F=F, G=G, perturbation=gradient_field(G), z=0.5,
        x0=np.asarray(x0, float), epsilon=epsilon, delta=delta, noise=nm,
        perturbation_form="b",
        name=f"canonical-sphere(beta={beta})",
        meta={"family": "canonical-sphere", "beta": float(beta),
              "noise_scale": float(noise_scale), "noise": str(noise)},
    )


def cap_system(epsilon=1e-3, x0=None):
    """Sphere with G = x3: no saddle, a single graph edge (for structure tests)."""
    F = sphere_field()
    G = height_field()
    if x0 is None:
        x0 = np.array([np.sqrt(1.0 - 0.25), 0.0, -0.5])
    return SurfaceSystem(
        F=F, G=G, perturbation=gradient_field(G), z=0.5,
        x0=np.asarray(x0, float), epsilon=epsilon, delta=0.0, noise=None,
        perturbation_form="b", name="cap-system",
        meta={"family": "cap"},
    )
