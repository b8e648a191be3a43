"""Flows grad F x d on a genus-one level surface: ergodic winding outside a
configured family of wells, local Hamiltonian structure inside them.

The default surface is the torus {(sqrt(x1^2+x2^2)-R)^2 + x3^2 = z}.  The
drive d is curl-free on the surface but not globally a gradient: the model
family is d = grad G + alpha grad(theta) with theta the major angle, which
makes trajectories the level curves of the multivalued W = G + alpha*theta.
Where W has an extremum/saddle pair the level curves close up into a well
U_k with single-valued Hamiltonian H_k = G + alpha*theta_k (a local branch);
everywhere else they wind around the torus and fill one ergodic class with
invariant density proportional to 1/|grad F|.

On the quotient the ergodic class collapses to a root vertex; each well
contributes one edge with averaged coefficients, a boundary loop rate
psi_k, an attract/repel flag s_k, and the root holding rate r_k.  The
limiting process holds at the root an exponential time with rate
kappa_hold * sum(r_k) (kappa_hold = 1; the rate reading of the published
parameter, which fits dimensionally), then enters edge k with probability
r_k / sum(r_j) and follows dh/dt = psi_k(h)/(2 T_k(h)).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import SlowfastError, TrappedInWellError, VanishingRateError
from .fields import (SmoothField, VectorField, NoiseMap, smooth_field,
                     explicit_field, tangent_projection_noise, fd_jacobian,
                     fd_hessian_from_gradient, project_to_surface)
from .levelsets import trace_level_curve, line_functional, point_at_level
from .averaging import aitken_limit
from .integrate import rk4_step, heun_step, NoiseStream, trajectory_rng, _cross


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# the canonical torus fields

def torus_surface_field(R=1.0):
    """F(x) = (sqrt(x1^2+x2^2) - R)^2 + x3^2; |grad F| = 2*sqrt(F) on {F=z}."""
    def value(x):
        x = np.asarray(x, float)
        rho = np.hypot(x[..., 0], x[..., 1])
        return (rho - R) ** 2 + x[..., 2] ** 2

    def gradient(x):
        x = np.asarray(x, float)
        rho = np.hypot(x[..., 0], x[..., 1])
        u = rho - R
        out = np.empty(x.shape)
        out[..., 0] = 2.0 * u * x[..., 0] / rho
        out[..., 1] = 2.0 * u * x[..., 1] / rho
        out[..., 2] = 2.0 * x[..., 2]
        return out

    def hessian(x):
        x = np.asarray(x, float)
        rho = np.hypot(x[..., 0], x[..., 1])
        u = rho - R
        h = np.zeros(x.shape[:-1] + (3, 3))
        for i in range(2):
            for j in range(2):
                d = 1.0 if i == j else 0.0
                h[..., i, j] = 2.0 * (x[..., i] * x[..., j] / rho**2
                                      + u * (d * rho**2 - x[..., i] * x[..., j]) / rho**3)
        h[..., 2, 2] = 2.0
        return h

    return SmoothField(value, gradient, hessian, name=f"torus(R={R})")


def grad_theta(x):
    x = np.asarray(x, float)
    rho2 = x[..., 0] ** 2 + x[..., 1] ** 2
    out = np.empty(x.shape)
    out[..., 0] = -x[..., 1] / rho2
    out[..., 1] = x[..., 0] / rho2
    out[..., 2] = 0.0
    return out


def grad_minor_angle(x, R=1.0):
    """Gradient of the minor angle atan2(x3, rho - R)."""
    x = np.asarray(x, float)
    rho = np.hypot(x[..., 0], x[..., 1])
    u = rho - R
    s2 = u ** 2 + x[..., 2] ** 2
    out = np.empty(x.shape)
    out[..., 0] = -x[..., 2] * x[..., 0] / (rho * s2)
    out[..., 1] = -x[..., 2] * x[..., 1] / (rho * s2)
    out[..., 2] = u / s2
    return out


def bump_energy_field(amplitude=1.0, concentration=2.0, R=1.0):
    """G(x) = amplitude * exp(concentration*(cos(theta)-1)) * cos(minor angle).

    A single angular bump times the minor-circle cosine: combined with the
    winding drive alpha*grad(theta) it produces exactly two wells (one around
    a maximum of W on the outer equator, one around a minimum on the inner
    equator) with saddles on their boundaries.
    """
    A, c = float(amplitude), float(concentration)

    def parts(x):
        x = np.asarray(x, float)
        rho = np.hypot(x[..., 0], x[..., 1])
        theta = np.arctan2(x[..., 1], x[..., 0])
        u = rho - R
        s = np.sqrt(u ** 2 + x[..., 2] ** 2)
        return rho, theta, u, s

    def value(x):
        rho, theta, u, s = parts(x)
        return A * np.exp(c * (np.cos(theta) - 1.0)) * (u / s)

    def gradient(x):
        x = np.asarray(x, float)
        rho, theta, u, s = parts(x)
        chi = np.exp(c * (np.cos(theta) - 1.0))
        dchi = -c * np.sin(theta) * chi
        cosphi = u / s
        # grad(cos phi) = (x3/s^3) * (x3 rho_hat - u z_hat)
        rho_hat = np.zeros(x.shape)
        rho_hat[..., 0] = x[..., 0] / rho
        rho_hat[..., 1] = x[..., 1] / rho
        gth = grad_theta(x)
        gcos = (x[..., 2] / s**3)[..., None] * (x[..., 2][..., None] * rho_hat)
        gcos[..., 2] -= (x[..., 2] / s**3) * u
        return A * (dchi * cosphi)[..., None] * gth + A * chi[..., None] * gcos

    return smooth_field(value, gradient=gradient,
                        name=f"bump-energy(A={A},c={c})")


def shifted_angle_field(center, alpha=1.0):
    """alpha * (branch of theta smooth on theta in (center-pi, center+pi))."""
    c0 = float(center)
    a = float(alpha)

    def value(x):
        x = np.asarray(x, float)
        theta = np.arctan2(x[..., 1], x[..., 0])
        return a * (c0 + _wrap(theta - c0))

    def gradient(x):
        return a * grad_theta(x)

    return smooth_field(value, gradient=gradient, name="winding-branch")


# ---------------------------------------------------------------------------
# the problem instance

@dataclass
class WellSpec:
    index: int
    H: SmoothField                # local Hamiltonian, d = grad H inside the branch
    saddle_x: np.ndarray
    center_x: np.ndarray
    center_is_max: bool
    H_saddle: float
    h_center: float               # H(center) - H(saddle), signed
    theta_center: float
    phi_center: float
    boundary_polygon: Optional[np.ndarray] = None   # (m,2) in centered angles

    def h_value(self, x):
        """h_k on the branch; meaningful inside the well, 0 declared outside."""
        return self.H.value(x) - self.H_saddle

    def contains_angles(self, theta, phi):
        if self.boundary_polygon is None:
            raise SlowfastError("well polygon not built")
        pts = np.stack([_wrap(np.asarray(theta) - self.theta_center),
                        _wrap(np.asarray(phi) - self.phi_center)], axis=-1)
        return _in_polygon(self.boundary_polygon, np.atleast_2d(pts))


def _in_polygon(poly, pts):
    """Ray-casting membership for (n,2) points against an (m,2) polygon."""
    x, y = pts[..., 0], pts[..., 1]
    inside = np.zeros(x.shape, dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for i in range(len(poly)):
        dy = y1[i] - y0[i]
        if dy == 0.0:
            continue
        cond = (y0[i] > y) != (y1[i] > y)
        x_cross = x0[i] + (x1[i] - x0[i]) * (y - y0[i]) / dy
        inside ^= cond & (x < x_cross)
    return inside


@dataclass
class TorusSystem:
    F: SmoothField
    d: VectorField
    p: VectorField
    z: float
    x0: np.ndarray
    epsilon: float
    delta: float
    noise: Optional[NoiseMap]
    wells: list
    R: float
    r: float
    alpha: float
    meta: dict = dc_field(default_factory=dict)
    # duck-typing hook: level tracing utilities look up .G; the torus traces
    # well loops against explicit H fields instead
    G: Optional[SmoothField] = None

    def angles(self, x):
        x = np.asarray(x, float)
        theta = np.arctan2(x[..., 1], x[..., 0])
        rho = np.hypot(x[..., 0], x[..., 1])
        phi = np.arctan2(x[..., 2], rho - self.R)
        return theta, phi

    def embed(self, theta, phi):
        theta = np.asarray(theta, float)
        phi = np.asarray(phi, float)
        rho = self.R + self.r * np.cos(phi)
        return np.stack([rho * np.cos(theta), rho * np.sin(theta),
                         self.r * np.sin(phi)], axis=-1)

    def area_weight(self, phi):
        """Area element factor: dm = r (R + r cos phi) dtheta dphi."""
        return self.r * (self.R + self.r * np.cos(phi))

    def in_any_well(self, x):
        theta, phi = self.angles(x)
        out = np.zeros(np.shape(theta), dtype=bool)
        for w in self.wells:
            out |= w.contains_angles(theta, phi).reshape(np.shape(theta))
        return out

    def well_depth_fraction(self, x):
        """Per-well |h_k(x)/h_k(M_k)| where x is inside the well, else 0."""
        theta, phi = self.angles(x)
        out = np.zeros((len(self.wells),) + np.shape(theta))
        for i, w in enumerate(self.wells):
            m = w.contains_angles(theta, phi).reshape(np.shape(theta))
            if np.any(m):
                hv = w.h_value(np.asarray(x, float)[m])
                out[i][m] = np.abs(hv / w.h_center)
        return out


def _flow_angle_rhs(tsys, theta, phi):
    """Angle-coordinate form of grad F x d for the bump family (for tests)."""
    A = tsys.meta["amplitude"]
    c = tsys.meta["concentration"]
    gamma = tsys.meta["gamma"]
    rho = tsys.R + tsys.r * np.cos(phi)
    chi = np.exp(c * (np.cos(theta) - 1.0))
    dchi = -c * np.sin(theta) * chi
    theta_dot = 2.0 * (A * chi * np.sin(phi) - gamma) / rho
    phi_dot = 2.0 * (A * dchi * np.cos(phi) + tsys.alpha) / rho
    return theta_dot, phi_dot


def _locate_bump_wells(amplitude, concentration, alpha, gamma):
    """Approximate rest points of the winding bump flow.

    Rest points solve sin(phi) = gamma/(A chi(theta)) together with
    A chi'(theta) cos(phi) = -alpha; with gamma = 0 they sit on the two
    equators and the general case is a continuous shift handled by the
    Newton polish afterwards.
    """
    A, c = amplitude, concentration

    def chi(theta):
        return np.exp(c * (np.cos(theta) - 1.0))

    def f(theta):          # A chi'(theta)
        return -A * c * np.sin(theta) * chi(theta)

    def bisect(lo, hi, target):
        flo = f(lo) - target
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            fm = f(mid) - target
            if flo * fm <= 0:
                hi = mid
            else:
                lo, flo = mid, fm
        return 0.5 * (lo + hi)

    ths = np.linspace(1e-3, np.pi - 1e-3, 2001)
    vals = f(ths)
    i_min = int(np.argmin(vals))
    if vals[i_min] >= -alpha:
        raise SlowfastError("winding too strong: no wells for these parameters")
    th_a = bisect(ths[0], ths[i_min], -alpha)       # center (max of W)
    th_b = bisect(ths[-1], ths[i_min], -alpha)      # saddle

    def phi_outer(th):
        s = np.clip(gamma / (A * chi(th)), -0.95, 0.95)
        return float(np.arcsin(s))

    def phi_inner(th):
        s = np.clip(gamma / (A * chi(th)), -0.95, 0.95)
        return float(np.pi - np.arcsin(s))

    return ((th_a, phi_outer(th_a), th_b, phi_outer(th_b), True),
            (-th_a, phi_inner(-th_a), -th_b, phi_inner(-th_b), False))


def canonical_torus_system(alpha=None, gamma=None, amplitude=1.0, concentration=2.0,
                           R=1.0, z=0.25, epsilon=1e-3, delta=0.1,
                           p_axis=(0.0, 1.5, 0.0), noise_scale=1.0):
    """Two-well torus system with an ergodic winding region.

    The drive d = grad G + alpha grad(theta) + gamma grad(phi) is curl-free
    on the surface but has nonzero periods over both homology cycles; with
    the golden period ratio alpha/gamma the level lines of the multivalued
    W = G + alpha theta + gamma phi wind densely outside the wells, which is
    what makes the complement a single ergodic class.  The perturbation is
    the rigid rotation field p = a x x (curl 2a): gradients of single-valued
    potentials pump no mass across the contractible separatrix loops, so a
    rotational component is what feeds the wells.  The default axis makes
    both wells attract (s_k = 1) at unequal rates.
    """
    r = float(np.sqrt(z))
    if alpha is None:
        alpha = 0.5 * (1.0 + np.sqrt(5.0)) * r * 0.5
    if gamma is None:
        gamma = alpha / (0.5 * (1.0 + np.sqrt(5.0)))
    F = torus_surface_field(R)
    G = bump_energy_field(amplitude, concentration, R)
    A, c = float(amplitude), float(concentration)

    def d_func(x):
        # fused grad G + alpha grad(theta) + gamma grad(phi): one pass over
        # the shared cylindrical intermediates (hot path of all integrators)
        x = np.asarray(x, float)
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        rho2 = x1 * x1 + x2 * x2
        rho = np.sqrt(rho2)
        u = rho - R
        s2 = u * u + x3 * x3
        s = np.sqrt(s2)
        inv_rho = 1.0 / rho
        cos_t = x1 * inv_rho
        sin_t = x2 * inv_rho
        chi = np.exp(c * (cos_t - 1.0))
        dchi = -c * sin_t * chi
        cosphi = u / s
        inv_s3 = 1.0 / (s2 * s)
        # coefficients of rho_hat and z_hat plus the pure-theta part
        coef_rho = A * chi * x3 * x3 * inv_s3 - gamma * x3 / s2
        coef_z = -A * chi * x3 * u * inv_s3 + gamma * u / s2
        coef_t = (A * dchi * cosphi + alpha) * inv_rho
        out = np.empty(x.shape)
        out[..., 0] = coef_rho * cos_t - coef_t * sin_t
        out[..., 1] = coef_rho * sin_t + coef_t * cos_t
        out[..., 2] = coef_z
        return out

    d = explicit_field(d_func, name="winding-drive")
    a_vec = np.asarray(p_axis, dtype=float)
    cross_mat = np.array([[0.0, -a_vec[2], a_vec[1]],
                          [a_vec[2], 0.0, -a_vec[0]],
                          [-a_vec[1], a_vec[0], 0.0]])

    def p_func(x):
        return np.cross(a_vec, np.asarray(x, float))

    def p_jac(x):
        x = np.asarray(x, float)
        return np.broadcast_to(cross_mat, x.shape[:-1] + (3, 3)).copy()

    p = explicit_field(p_func, jacobian=p_jac, name="rotation-pump")
    noise = tangent_projection_noise(F, scale=noise_scale)

    sys_stub = TorusSystem(F=F, d=d, p=p, z=z, x0=None, epsilon=epsilon,
                           delta=delta, noise=noise, wells=[], R=R, r=r,
                           alpha=alpha, G=G,
                           meta={"family": "canonical-torus", "alpha": alpha,
                                 "gamma": gamma, "amplitude": amplitude,
                                 "concentration": concentration,
                                 "p_axis": tuple(float(v) for v in a_vec),
                                 "noise_scale": noise_scale})
    wells = []
    for idx, (th_c, ph_c, th_s, ph_s, is_max) in enumerate(
            _locate_bump_wells(amplitude, concentration, alpha, gamma), start=1):
        H = _branch_hamiltonian(G, alpha, th_c, gamma, ph_c, R)
        center = _polish_rest_point(sys_stub, H, sys_stub.embed(th_c, ph_c))
        sad = _polish_rest_point(sys_stub, H, sys_stub.embed(th_s, ph_s))
        Hs = float(H.value(sad))
        # classify the center from the constrained Hessian rather than trust
        # the small-gamma continuation
        is_max = _center_is_max(sys_stub, H, center)
        wells.append(WellSpec(index=idx, H=H, saddle_x=sad, center_x=center,
                              center_is_max=is_max, H_saddle=Hs,
                              h_center=float(H.value(center)) - Hs,
                              theta_center=th_c, phi_center=ph_c))
    sys_stub.wells = wells
    for w in wells:
        w.boundary_polygon = _well_polygon(sys_stub, w)
    sys_stub.x0 = _ergodic_start(sys_stub)
    return sys_stub


def _branch_hamiltonian(G, alpha, theta_center, gamma, phi_center, R):
    """Single-valued W = G + alpha*theta + gamma*phi on branches centered at
    the well (the branch cuts sit on the opposite side of each angle)."""
    th_branch = shifted_angle_field(theta_center, alpha)
    th0 = float(theta_center)
    ph0 = float(phi_center)

    def value(x):
        x = np.asarray(x, float)
        rho = np.hypot(x[..., 0], x[..., 1])
        phi = np.arctan2(x[..., 2], rho - R)
        return (G.value(x) + th_branch.value(x)
                + gamma * (ph0 + _wrap(phi - ph0)))

    def gradient(x):
        return (G.gradient(x) + th_branch.gradient(x)
                + gamma * grad_minor_angle(x, R))

    return smooth_field(value, gradient=gradient, name="well-hamiltonian")


def _center_is_max(tsys, H, center):
    from .levelsets import _tangent_frame
    gf = tsys.F.gradient(center)
    n = gf / np.linalg.norm(gf)
    e1, e2 = _tangent_frame(n)
    lam = np.dot(H.gradient(center), gf) / np.dot(gf, gf)
    E = np.stack([e1, e2])
    M = E @ (H.hessian(center) - lam * tsys.F.hessian(center)) @ E.T
    eigs = np.linalg.eigvalsh(M)
    if eigs[0] * eigs[1] <= 0:
        raise SlowfastError(f"well center is not an extremum: eigs {eigs}")
    return bool(eigs[0] < 0)


def _polish_rest_point(tsys, H, x_guess, iters=60):
    """Newton on the tangential gradient of H within {F=z}."""
    x = project_to_surface(tsys.F, tsys.z, np.array(x_guess, float))
    for _ in range(iters):
        gh = H.gradient(x)
        gf = tsys.F.gradient(x)
        n = gf / np.linalg.norm(gf)
        pt = gh - np.dot(gh, n) * n
        if np.linalg.norm(pt) < 1e-12:
            return x
        Hh = H.hessian(x)
        # damped Newton in the tangent plane
        from .levelsets import _tangent_frame
        e1, e2 = _tangent_frame(n)
        E = np.stack([e1, e2])
        lam = np.dot(gh, gf) / np.dot(gf, gf)
        M = E @ (Hh - lam * tsys.F.hessian(x)) @ E.T
        rhs = -E @ pt
        try:
            step = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError:
            break
        x = project_to_surface(tsys.F, tsys.z, x + min(1.0, 0.2 / max(np.linalg.norm(step), 1e-9)) * (step[0] * e1 + step[1] * e2))
    return x


def _well_polygon(tsys, w, h_rel=5e-3, n_pts=400):
    """Near-separatrix loop traced in centered angle coordinates."""
    h = w.h_center * h_rel
    seed = point_at_level(tsys, _center_offset(tsys, w), w.H_saddle + h, second=w.H)
    loop = trace_level_curve(tsys, w.H_saddle + h, seed, second=w.H)
    theta, phi = tsys.angles(loop.points)
    poly = np.stack([_wrap(theta - w.theta_center), _wrap(phi - w.phi_center)], axis=-1)
    step = max(1, len(poly) // n_pts)
    return poly[::step]


def _center_offset(tsys, w, frac=3e-2):
    """A point slightly off the well center, inside the well."""
    th = w.theta_center + frac
    return project_to_surface(tsys.F, tsys.z, tsys.embed(th, w.phi_center))


def _ergodic_start(tsys, n_grid=60):
    th = np.linspace(-np.pi, np.pi, n_grid, endpoint=False)
    ph = np.linspace(-np.pi, np.pi, n_grid, endpoint=False)
    TH, PH = np.meshgrid(th, ph, indexing="ij")
    pts = tsys.embed(TH.ravel(), PH.ravel())
    free = ~tsys.in_any_well(pts)
    # keep a margin from the wells: drop the 20% of free points closest to a center
    d = np.min(np.stack([np.linalg.norm(pts - w.center_x, axis=-1)
                         for w in tsys.wells]), axis=0)
    order = np.argsort(-d)
    for i in order:
        if free[i]:
            return pts[i]
    raise SlowfastError("no ergodic start point found")


# ---------------------------------------------------------------------------
# integration on the torus

def torus_drift(tsys, slow=True):
    inv_eps = 1.0 / tsys.epsilon

    def drift(x):
        gf = tsys.F.gradient(x)
        v = _cross(gf, tsys.d.func(x))
        if not slow:
            return v
        return inv_eps * v + _cross(gf, tsys.p.func(x))
    return drift


def _project_surface_and_level(tsys, x, x_ref, tol=1e-11, max_iter=30):
    """Newton projection onto {F=z} and {W = W(x_ref)} for the multivalued
    W = G + alpha theta + gamma phi, using the per-step wrapped increment so
    no global branch tracking is needed (steps stay well below half a turn).
    """
    alpha = tsys.alpha
    gamma = tsys.meta.get("gamma", 0.0)
    th0, ph0 = tsys.angles(x_ref)
    G0 = tsys.G.value(x_ref)
    for _ in range(max_iter):
        rF = tsys.F.value(x) - tsys.z
        th, ph = tsys.angles(x)
        rW = (tsys.G.value(x) - G0) + alpha * _wrap(th - th0) + gamma * _wrap(ph - ph0)
        if np.all(np.abs(rF) < tol) and np.all(np.abs(rW) < tol):
            return x
        gf = tsys.F.gradient(x)
        gw = tsys.d.func(x)                  # d = grad W wherever W is smooth
        m11 = np.sum(gf * gf, axis=-1)
        m12 = np.sum(gf * gw, axis=-1)
        m22 = np.sum(gw * gw, axis=-1)
        det = m11 * m22 - m12 * m12
        a = (rF * m22 - rW * m12) / det
        b = (rW * m11 - rF * m12) / det
        x = x - a[..., None] * gf - b[..., None] * gw
    return x


def run_torus_batch(tsys, X0, t_end, h, mode="fast", master_seed=0, delta=None,
                    tol_f=1e-10, monitor=None, sample_every=None, rescaled=False):
    """Batch integration on the torus surface.

    mode "fast": conservative flow grad F x d (RK4, projection onto F).
    mode "sde": split steps in slow time.  The conservative rotation is
    advanced with RK4 and then projected back onto both invariants (F and
    the local level of the multivalued W), which removes the slow spiraling
    that raw time steppers superimpose on level-curve dynamics; the
    perturbation and the Stratonovich noise, which are exactly the terms
    meant to move W, act in separate substeps projected onto F only.
    ``rescaled`` replaces grad F by its unit vector (the incompressible
    auxiliary flow used to verify the invariant density).
    """
    X = np.atleast_2d(np.array(X0, float)).copy()
    X = project_to_surface(tsys.F, tsys.z, X, tol=tol_f)
    n = X.shape[0]
    n_steps = int(np.ceil(t_end / h))
    samples = []
    if mode == "fast":
        if rescaled:
            def drift(x):
                gf = tsys.F.gradient(x)
                gf = gf / np.linalg.norm(gf, axis=-1, keepdims=True)
                return _cross(gf, tsys.d.func(x))
        else:
            drift = torus_drift(tsys, slow=False)
    else:
        inv_eps = 1.0 / tsys.epsilon

        def drift(x):
            return inv_eps * _cross(tsys.F.gradient(x), tsys.d.func(x))

        def pump(x):
            return _cross(tsys.F.gradient(x), tsys.p.func(x))

        dlt = tsys.delta if delta is None else delta
        stream = NoiseStream(master_seed, n)
        sqrt_half = np.sqrt(0.5 * h)
    active = np.ones(n, dtype=bool)
    t = np.zeros(n)

    def noise_half(x, dw):
        s0 = tsys.noise.matvec(x, dw)
        xp = x + dlt * s0
        s1 = tsys.noise.matvec(xp, dw)
        return x + 0.5 * dlt * (s0 + s1)

    for step in range(n_steps):
        if not np.any(active):
            break
        if mode == "fast":
            X[active] = rk4_step(drift, X[active], h)
            X[active] = project_to_surface(tsys.F, tsys.z, X[active], tol=tol_f)
        else:
            xa = X[active]
            dw1 = stream.next(sqrt_half)
            dw2 = stream.next(sqrt_half)
            if dlt != 0.0:
                xa = noise_half(xa, dw1[active])
            xa = xa + h * pump(xa)
            xa = project_to_surface(tsys.F, tsys.z, xa, tol=tol_f)
            x_ref = xa
            xa = rk4_step(drift, xa, h)
            xa = _project_surface_and_level(tsys, xa, x_ref)
            if dlt != 0.0:
                xa = noise_half(xa, dw2[active])
                xa = project_to_surface(tsys.F, tsys.z, xa, tol=tol_f)
            X[active] = xa
        t[active] += h
        if monitor is not None:
            na = monitor(step, t, X, active)
            if na is not None:
                active = na
        if sample_every is not None and (step + 1) % sample_every == 0:
            samples.append(X.copy())
    return X, t, active, samples


# ---------------------------------------------------------------------------
# Lemma-style invariant measure check

@dataclass
class InvariantCheck:
    chi2: float
    dof: int
    p_value: float
    n_samples: int
    n_cells: int


def invariant_measure_check(tsys, t_end=1000.0, bins=12, h=5e-3, n_chains=64,
                            subsample=400, seed=0, rescaled=False):
    """Occupation histogram of the conservative flow against the predicted
    invariant density (proportional to 1/|grad F|, i.e. to the area measure
    on this surface family since |grad F| is constant there).

    Chains start in the ergodic class; entering a well raises an error.
    Returns the chi-square statistic over angle cells fully outside wells.
    """
    from scipy.stats import chi2 as chi2_dist
    rng = np.random.default_rng(seed)
    starts = []
    while len(starts) < n_chains:
        th = rng.uniform(-np.pi, np.pi)
        ph = rng.uniform(-np.pi, np.pi)
        x = tsys.embed(th, ph)
        if not bool(tsys.in_any_well(x[None])[0]):
            starts.append(x)
    X0 = np.array(starts)
    _, _, _, samples = run_torus_batch(tsys, X0, t_end, h, mode="fast",
                                       sample_every=subsample, rescaled=rescaled)
    pts = np.concatenate(samples, axis=0)
    if np.any(tsys.in_any_well(pts[:: max(1, len(pts) // 2000)])):
        raise TrappedInWellError("an ergodic chain entered a well")
    theta, phi = tsys.angles(pts)
    edges = np.linspace(-np.pi, np.pi, bins + 1)
    counts, _, _ = np.histogram2d(theta, phi, bins=[edges, edges])
    # expected occupation per cell: the 1/|grad F| measure = area/(2r) here
    th_c = 0.5 * (edges[:-1] + edges[1:])
    exp_phi = tsys.R * np.diff(edges) + tsys.r * np.diff(np.sin(edges))
    expected = np.outer(np.full(bins, np.diff(edges)[0]), exp_phi)
    # keep only cells whose corners all avoid the wells
    keep = np.ones((bins, bins), dtype=bool)
    TH, PH = np.meshgrid(edges, edges, indexing="ij")
    corner_in = np.zeros((bins + 1, bins + 1), dtype=bool)
    for w in tsys.wells:
        corner_in |= w.contains_angles(TH.ravel(), PH.ravel()).reshape(TH.shape)
    keep &= ~(corner_in[:-1, :-1] | corner_in[1:, :-1] | corner_in[:-1, 1:] | corner_in[1:, 1:])
    c = counts[keep]
    e = expected[keep]
    e = e / e.sum() * c.sum()
    stat = float(np.sum((c - e) ** 2 / e))
    dof = int(keep.sum() - 1)
    p = float(chi2_dist.sf(stat, dof))
    return InvariantCheck(chi2=stat, dof=dof, p_value=p,
                          n_samples=int(c.sum()), n_cells=int(keep.sum()))


# ---------------------------------------------------------------------------
# rates and the rooted graph

def s_rule(psi_sign, center_is_max):
    """Attract flag: 1 when the perturbation pumps mass into the well."""
    if psi_sign > 0 and center_is_max:
        return 1
    if psi_sign < 0 and not center_is_max:
        return 1
    return 0


@dataclass
class TorusEdge:
    well_index: int
    h_grid: np.ndarray
    T: np.ndarray
    a: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b: np.ndarray
    psi_bar: float                # 2 * a at the separatrix (h -> 0 limit)
    beta: float                   # b(0) / lambda_erg
    s: int
    rate: float                   # s * |psi| / (2 lambda_erg)
    h_center: float
    center_is_max: bool

    def Bbar(self, h):
        """psi(h) / (2 T(h)) = a(h)/T(h), interpolated."""
        if "B" not in self.__dict__.setdefault("_interp", {}):
            self._interp["B"] = PchipInterpolator(self.h_grid, self.a / self.T,
                                                  extrapolate=False)
        h_cl = np.clip(h, self.h_grid[0], self.h_grid[-1])
        return self._interp["B"](h_cl)


@dataclass
class RootedGraph:
    lambda_erg: float
    edges: dict
    kappa_hold: float = 1.0

    @property
    def total_rate(self):
        return sum(e.rate for e in self.edges.values())

    def entry_probabilities(self):
        tot = self.total_rate
        if tot <= 0:
            return {k: 0.0 for k in self.edges}
        return {k: e.rate / tot for k, e in self.edges.items()}


def ergodic_volume(tsys, n_grid=400, refine_tol=1e-3):
    """lambda = integral over the ergodic class of dm / |grad F|.

    Angle-grid quadrature of the exact area element with the well polygons
    masked out; the grid is doubled until the value stabilizes.
    """
    prev = None
    n = n_grid
    for _ in range(4):
        th = np.linspace(-np.pi, np.pi, n, endpoint=False) + np.pi / n
        ph = np.linspace(-np.pi, np.pi, n, endpoint=False) + np.pi / n
        TH, PH = np.meshgrid(th, ph, indexing="ij")
        mask = np.zeros(TH.shape, dtype=bool)
        for w in tsys.wells:
            mask |= w.contains_angles(TH.ravel(), PH.ravel()).reshape(TH.shape)
        gf = 2.0 * tsys.r          # |grad F| on the surface
        cell = (2.0 * np.pi / n) ** 2
        val = float(np.sum(~mask * tsys.area_weight(PH)) * cell / gf)
        if prev is not None and abs(val - prev) <= refine_tol * abs(val):
            return val
        prev = val
        n *= 2
    return prev


def _torus_phi_integrands(tsys, w):
    H = w.H

    def phi_a(pts):
        gf = tsys.F.gradient(pts)
        return np.sum(H.gradient(pts) * np.cross(gf, tsys.p.func(pts)), axis=-1)

    def phi_a1(pts):
        ds = tsys.noise.dsigma(pts)
        s = tsys.noise.sigma(pts)
        Sg = np.einsum("...ijk,...kj->...i", ds, s)
        return np.sum(H.gradient(pts) * Sg, axis=-1)

    def phi_a2(pts):
        s = tsys.noise.sigma(pts)
        a = np.einsum("...ij,...kj->...ik", s, s)
        return np.einsum("...ij,...ij->...", a, H.hessian(pts))

    def phi_b(pts):
        s = tsys.noise.sigma(pts)
        stg = np.einsum("...ji,...j->...i", s, H.gradient(pts))
        return np.sum(stg * stg, axis=-1)

    return phi_a, phi_a1, phi_a2, phi_b


def torus_rates(tsys, n_h=21, h_seq_rel=(1e-2, 3e-3, 1e-3), lambda_erg=None,
                psi_tol=1e-8) -> RootedGraph:
    """Per-well averaged coefficient tables, boundary rates and root rates."""
    lam = ergodic_volume(tsys) if lambda_erg is None else lambda_erg
    edges = {}
    for w in tsys.wells:
        phi_a, phi_a1, phi_a2, phi_b = _torus_phi_integrands(tsys, w)
        rel = np.geomspace(2e-4, 0.5, max(4, n_h // 2))
        fracs = np.unique(np.concatenate([rel, 1.0 - rel]))
        h_grid = w.h_center * fracs        # signed, from separatrix toward center
        cols = {"T": [], "a": [], "a1": [], "a2": [], "b": []}
        seed = _center_offset(tsys, w)
        for h in h_grid[::-1]:             # start near the center, march outward
            lvl = w.H_saddle + h
            seed = point_at_level(tsys, seed, lvl, second=w.H)
            c = trace_level_curve(tsys, lvl, seed, second=w.H)
            seed = c.points[0]
            cols["T"].append(c.period)
            cols["a"].append(line_functional(c, phi_a))
            cols["a1"].append(line_functional(c, phi_a1))
            cols["a2"].append(line_functional(c, phi_a2))
            cols["b"].append(line_functional(c, phi_b))
        for k in cols:
            cols[k] = np.array(cols[k][::-1])
        # h -> 0 limits along the configured relative sequence
        lim_vals = {"a": [], "b": []}
        for frac in h_seq_rel:
            lvl = w.H_saddle + w.h_center * frac
            seed2 = point_at_level(tsys, _center_offset(tsys, w), lvl, second=w.H)
            c = trace_level_curve(tsys, lvl, seed2, second=w.H)
            lim_vals["a"].append(line_functional(c, phi_a))
            lim_vals["b"].append(line_functional(c, phi_b))
        if max(abs(v) for v in lim_vals["a"]) < psi_tol:
            raise VanishingRateError(
                f"boundary pump rate for well {w.index} below tolerance")
        a0 = aitken_limit(lim_vals["a"])
        b0 = aitken_limit(lim_vals["b"])
        psi = 2.0 * a0
        if abs(psi) < psi_tol:
            raise VanishingRateError(f"psi for well {w.index} below tolerance: {psi}")
        s = s_rule(np.sign(psi), w.center_is_max)
        order = np.argsort(h_grid)         # strictly increasing signed h for PCHIP
        edge = TorusEdge(well_index=w.index, h_grid=h_grid[order],
                         T=cols["T"][order], a=cols["a"][order],
                         a1=cols["a1"][order], a2=cols["a2"][order],
                         b=cols["b"][order],
                         psi_bar=psi, beta=b0 / lam, s=s,
                         rate=s * abs(psi) / (2.0 * lam),
                         h_center=w.h_center, center_is_max=w.center_is_max)
        edges[w.index] = edge
    return RootedGraph(lambda_erg=lam, edges=edges)


# ---------------------------------------------------------------------------
# the limiting process on the rooted graph

def _edge_entry_profile(edge: TorusEdge, n=400):
    """Deterministic times t(h) for dh/dt = Bbar(h) from the separatrix into
    the well; the |log| divergence of T at h=0 is integrable."""
    hs = np.sort(np.abs(edge.h_grid))
    sign = np.sign(edge.h_center)
    h_abs = np.geomspace(hs[0], hs[-1], n)
    rate = np.abs(edge.Bbar(sign * h_abs))
    inv = 1.0 / rate
    t = np.concatenate([[0.0], np.cumsum(0.5 * (inv[1:] + inv[:-1]) * np.diff(h_abs))])
    # entry tail from 0 to the first grid point: Bbar ~ psi/(2 T(h)), T ~ log
    t = t + h_abs[0] / max(rate[0], 1e-300)
    return h_abs, t


def simulate_torus_limit(rg: RootedGraph, start, t_end, rng, kappa_hold=None):
    """Root-and-wells limit process: exponential holding at the root with
    rate kappa*sum(r_k), entry into edge k with probability r_k/sum(r),
    deterministic motion inside edges."""
    kappa = rg.kappa_hold if kappa_hold is None else kappa_hold
    times = [0.0]
    edges_out = [0]
    hs = [0.0]
    log = []
    profiles = {k: _edge_entry_profile(e) for k, e in rg.edges.items()}
    t = 0.0
    state_edge, state_h = start if start is not None else (0, 0.0)
    total = kappa * rg.total_rate
    probs = rg.entry_probabilities()
    keys = list(rg.edges)
    pvec = np.array([probs[k] for k in keys])
    while t < t_end:
        if state_edge == 0:
            if total <= 0:
                times.append(t_end)
                edges_out.append(0)
                hs.append(0.0)
                break
            tau = rng.exponential(1.0 / total)
            t_entry = t + tau
            if t_entry >= t_end:
                times.append(t_end)
                edges_out.append(0)
                hs.append(0.0)
                break
            k = keys[int(rng.choice(len(keys), p=pvec))]
            log.append((t_entry, "root", k))
            times.append(t_entry)
            edges_out.append(0)
            hs.append(0.0)
            state_edge, state_h = k, 0.0
            t = t_entry
            continue
        edge = rg.edges[state_edge]
        h_abs, prof_t = profiles[state_edge]
        sign = np.sign(edge.h_center)
        moving_in = edge.s == 1
        if moving_in:
            # advance along the entry profile until the horizon
            remaining = t_end - t
            mask = prof_t <= remaining
            times.extend((t + prof_t[mask]).tolist())
            edges_out.extend([state_edge] * int(mask.sum()))
            hs.extend((sign * h_abs[mask]).tolist())
            if np.all(mask):
                t_last = t + prof_t[-1]
                times.append(t_end)
                edges_out.append(state_edge)
                hs.append(sign * h_abs[-1])
            break
        # repelled well: from |h0| back to the root in finite time
        h0 = abs(state_h) if state_h else h_abs[-1]
        i0 = np.searchsorted(h_abs, h0)
        back_t = prof_t[i0] - prof_t[:i0 + 1][::-1]
        times.extend((t + back_t).tolist())
        edges_out.extend([state_edge] * len(back_t))
        hs.extend((sign * h_abs[:i0 + 1][::-1]).tolist())
        t = t + back_t[-1]
        log.append((t, f"return-{state_edge}", 0))
        state_edge, state_h = 0, 0.0
    from .graphproc import GraphPath
    return GraphPath(times=np.array(times), edges=np.array(edges_out),
                     gs=np.array(hs), branching_log=log)


# ---------------------------------------------------------------------------
# full 3-D comparison

def simulate_torus_sde(tsys, x_start, t_end, h, master_seed=0, delta=None,
                       sample_every=50):
    """One slow-time SDE trajectory with its projection onto the rooted graph."""
    X, t, active, samples = run_torus_batch(
        tsys, np.atleast_2d(x_start), t_end, h, mode="sde",
        master_seed=master_seed, delta=delta, sample_every=sample_every)
    pts = np.concatenate(samples, axis=0) if samples else np.atleast_2d(X)
    ts = h * sample_every * (1 + np.arange(len(pts)))
    theta, phi = tsys.angles(pts)
    edge_of = np.zeros(len(pts), dtype=int)
    h_of = np.zeros(len(pts))
    for w in tsys.wells:
        m = w.contains_angles(theta, phi)
        edge_of[m] = w.index
        h_of[m] = w.h_value(pts[m])
    from .graphproc import GraphPath
    gp = GraphPath(times=ts, edges=edge_of, gs=h_of)
    from .integrate import Trajectory
    traj = Trajectory(t=ts, x=pts, g=h_of, events=[])
    return traj, gp


def root_holding_experiment(tsys, n_runs, t_max, h, depth_frac=0.35,
                            master_seed=0, delta=None):
    """First times at which SDE walkers started in the ergodic class sink to
    the given depth fraction inside some well; returns (times, well ids)."""
    rng = np.random.default_rng(master_seed)
    starts = []
    while len(starts) < n_runs:
        th = rng.uniform(-np.pi, np.pi)
        ph = rng.uniform(-np.pi, np.pi)
        x = tsys.embed(th, ph)
        if not bool(tsys.in_any_well(x[None])[0]):
            starts.append(x)
    X0 = np.array(starts)
    t_hit = np.full(n_runs, np.nan)
    well_hit = np.zeros(n_runs, dtype=int)

    boxes = []
    for w in tsys.wells:
        poly = w.boundary_polygon
        boxes.append((w, np.max(np.abs(poly[:, 0])), np.max(np.abs(poly[:, 1]))))

    def monitor(step, t, X, active):
        na = active.copy()
        theta, phi = tsys.angles(X)
        for w, bth, bph in boxes:
            rel_th = _wrap(theta - w.theta_center)
            rel_ph = _wrap(phi - w.phi_center)
            cand = active & (np.abs(rel_th) <= bth) & (np.abs(rel_ph) <= bph)
            if not np.any(cand):
                continue
            depth = np.zeros(len(X))
            depth[cand] = np.abs(w.h_value(X[cand]) / w.h_center)
            hit = cand & (depth >= depth_frac)
            if np.any(hit):
                inside = np.zeros(len(X), dtype=bool)
                inside[hit] = w.contains_angles(theta[hit], phi[hit])
                hit &= inside
            if np.any(hit):
                t_hit[hit] = t[hit]
                well_hit[hit] = w.index
                na &= ~hit
        return na

    run_torus_batch(tsys, X0, t_max, h, mode="sde", master_seed=master_seed,
                    delta=delta, monitor=monitor)
    return t_hit, well_hit


def predicted_entry_time(rg: RootedGraph, depth_frac=0.35, kappa_hold=None):
    """Graph-side mean of the same first-passage functional: exponential
    holding plus the deterministic entry leg to the given depth."""
    kappa = rg.kappa_hold if kappa_hold is None else kappa_hold
    total = kappa * rg.total_rate
    if total <= 0:
        return np.inf
    probs = rg.entry_probabilities()
    legs = 0.0
    for k, e in rg.edges.items():
        h_abs, prof_t = _edge_entry_profile(e)
        target = depth_frac * abs(e.h_center)
        leg = float(np.interp(target, h_abs, prof_t))
        legs += probs[k] * leg
    return 1.0 / total + legs
