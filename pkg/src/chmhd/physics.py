"""Material laws, double-well potential, manufactured solution and forcing."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict
from types import SimpleNamespace

import numpy as np

PI = np.pi


@dataclass(frozen=True)
class PhysParams:
    """Model constants. Index 1 labels fluid I (phi = -1), 2 fluid II (phi = +1)."""

    rho1: float = 1.0
    rho2: float = 1.0
    eta1: float = 1.0
    eta2: float = 1.0
    sigma1: float = 1.0
    sigma2: float = 1.0
    m1: float = 1.0
    m2: float = 1.0
    mu: float = 1.0
    gamma: float = 1.0
    epsilon: float = 1.0
    lam: float = 1.0
    gravity: tuple = (0.0, 0.0)

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("gravity", "lam"):
                continue
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"parameter {f.name} must be strictly positive, got {v}")
        g = tuple(float(x) for x in self.gravity)
        if len(g) != 2:
            raise ValueError("gravity must be a 2-vector")
        object.__setattr__(self, "gravity", g)

    def replace(self, **kw) -> "PhysParams":
        d = asdict(self)
        d.update(kw)
        return PhysParams(**d)

    def pair(self, kind: str) -> tuple[float, float]:
        return {
            "density": (self.rho1, self.rho2),
            "viscosity": (self.eta1, self.eta2),
            "conductivity": (self.sigma1, self.sigma2),
            "mobility": (self.m1, self.m2),
        }[kind]

    def slope(self, kind: str) -> float:
        a, b = self.pair(kind)
        return 0.5 * (b - a)


def coeff_eval(kind: str, params: PhysParams, phi):
    """Affine interpolation between the two fluid constants.

    Each law uses its own pair of constants; ``phi`` is used as given
    (apply :func:`cut_off` first to stay inside the physical bounds).
    """
    a, b = params.pair(kind)
    w = 0.5 * (1.0 + np.asarray(phi))
    return (1.0 - w) * a + w * b  # exact at phi = -1 and phi = 1


def cut_off(phi):
    """Clip the phase field to [-1, 1]."""
    return np.clip(phi, -1.0, 1.0)


def double_well_F(phi):
    return 0.25 * (np.asarray(phi) ** 2 - 1.0) ** 2


def double_well_f(phi):
    phi = np.asarray(phi)
    return phi ** 3 - phi


def convex_split_f(phi_new, phi_old):
    """Implicit convex part, explicit concave part."""
    return np.asarray(phi_new) ** 3 - np.asarray(phi_old)


# ---------------------------------------------------------------------------
# manufactured solution on the unit square


def _dcos(k, n, z):
    """n-th derivative of cos(k z)."""
    return k ** n * np.cos(k * z + n * PI / 2)


def _dsin(k, n, z):
    return k ** n * np.sin(k * z + n * PI / 2)


def _cos2(n, z):
    """n-th derivative of cos^2(pi z) = (1 + cos 2 pi z) / 2."""
    return 0.5 * (1.0 + np.cos(2 * PI * z)) if n == 0 else 0.5 * _dcos(2 * PI, n, z)


def _sin2(n, z):
    """n-th derivative of sin^2(pi z) = (1 - cos 2 pi z) / 2."""
    return 0.5 * (1.0 - np.cos(2 * PI * z)) if n == 0 else -0.5 * _dcos(2 * PI, n, z)


class ExactSolution:
    """Smooth reference fields with closed-form derivatives.

    ``phi = cos t cos^2(pi x) cos^2(pi y)``,
    ``u = cos t (pi sin(2 pi y) sin^2(pi x), -pi sin(2 pi x) sin^2(pi y))``,
    ``p = cos t (2x - 2)(2y - 1)``,
    ``B = cos t (sin(pi x) cos(pi y), -sin(pi y) cos(pi x))``.
    The chemical potential is ``-gamma eps lap(phi) + gamma/eps (phi^3 - phi)``.
    """

    def __init__(self, params: PhysParams):
        self.params = params

    # -- phi ---------------------------------------------------------------
    @staticmethod
    def _phi_d(x, y, a, b):
        return _cos2(a, x) * _cos2(b, y)

    def phi(self, x, t):
        return np.cos(t) * self._phi_d(x[..., 0], x[..., 1], 0, 0)

    def phi_t(self, x, t):
        return -np.sin(t) * self._phi_d(x[..., 0], x[..., 1], 0, 0)

    def phi_grad(self, x, t):
        X, Y = x[..., 0], x[..., 1]
        return np.cos(t) * np.stack([self._phi_d(X, Y, 1, 0), self._phi_d(X, Y, 0, 1)], -1)

    def phi_lap(self, x, t):
        X, Y = x[..., 0], x[..., 1]
        return np.cos(t) * (self._phi_d(X, Y, 2, 0) + self._phi_d(X, Y, 0, 2))

    def phi_grad_lap(self, x, t):
        X, Y = x[..., 0], x[..., 1]
        d = self._phi_d
        return np.cos(t) * np.stack([d(X, Y, 3, 0) + d(X, Y, 1, 2), d(X, Y, 2, 1) + d(X, Y, 0, 3)], -1)

    def phi_bilap(self, x, t):
        X, Y = x[..., 0], x[..., 1]
        d = self._phi_d
        return np.cos(t) * (d(X, Y, 4, 0) + 2 * d(X, Y, 2, 2) + d(X, Y, 0, 4))

    # -- omega ---------------------------------------------------------------
    def omega(self, x, t):
        g, e = self.params.gamma, self.params.epsilon
        return -g * e * self.phi_lap(x, t) + g / e * double_well_f(self.phi(x, t))

    def omega_grad(self, x, t):
        g, e = self.params.gamma, self.params.epsilon
        ph = self.phi(x, t)
        return (-g * e * self.phi_grad_lap(x, t)
                + g / e * (3 * ph ** 2 - 1)[..., None] * self.phi_grad(x, t))

    def omega_lap(self, x, t):
        g, e = self.params.gamma, self.params.epsilon
        ph = self.phi(x, t)
        gp = self.phi_grad(x, t)
        lap = self.phi_lap(x, t)
        lap_cube = 6 * ph * np.sum(gp * gp, -1) + 3 * ph ** 2 * lap
        return -g * e * self.phi_bilap(x, t) + g / e * (lap_cube - lap)

    # -- velocity ----------------------------------------------------------------
    @staticmethod
    def _u_d(x, y, a, b):
        """Spatial derivative d^a/dx^a d^b/dy^b of u / cos t."""
        u1 = PI * _sin2(a, x) * _dsin(2 * PI, b, y)
        u2 = -PI * _dsin(2 * PI, a, x) * _sin2(b, y)
        return np.stack([u1, u2], -1)

    def u(self, x, t):
        return np.cos(t) * self._u_d(x[..., 0], x[..., 1], 0, 0)

    def u_t(self, x, t):
        return -np.sin(t) * self._u_d(x[..., 0], x[..., 1], 0, 0)

    def u_grad(self, x, t):
        """``[..., i, d] = d u_i / d x_d``."""
        X, Y = x[..., 0], x[..., 1]
        return np.cos(t) * np.stack([self._u_d(X, Y, 1, 0), self._u_d(X, Y, 0, 1)], -1)

    def u_hess(self, x, t):
        """``[..., i, d, e] = d^2 u_i / dx_d dx_e``."""
        X, Y = x[..., 0], x[..., 1]
        xx, xy, yy = self._u_d(X, Y, 2, 0), self._u_d(X, Y, 1, 1), self._u_d(X, Y, 0, 2)
        h = np.stack([np.stack([xx, xy], -1), np.stack([xy, yy], -1)], -2)
        return np.cos(t) * h

    # -- pressure ----------------------------------------------------------------
    def p(self, x, t):
        return np.cos(t) * (2 * x[..., 0] - 2) * (2 * x[..., 1] - 1)

    def p_grad(self, x, t):
        return np.cos(t) * np.stack([2 * (2 * x[..., 1] - 1), 2 * (2 * x[..., 0] - 2)], -1)

    # -- magnetic field ------------------------------------------------------------
    @staticmethod
    def _b_d(x, y, a, b):
        b1 = _dsin(PI, a, x) * _dcos(PI, b, y)
        b2 = -_dsin(PI, b, y) * _dcos(PI, a, x)
        return np.stack([b1, b2], -1)

    def B(self, x, t):
        return np.cos(t) * self._b_d(x[..., 0], x[..., 1], 0, 0)

    def B_t(self, x, t):
        return -np.sin(t) * self._b_d(x[..., 0], x[..., 1], 0, 0)

    def B_grad(self, x, t):
        X, Y = x[..., 0], x[..., 1]
        return np.cos(t) * np.stack([self._b_d(X, Y, 1, 0), self._b_d(X, Y, 0, 1)], -1)

    def B_hess(self, x, t):
        X, Y = x[..., 0], x[..., 1]
        xx, xy, yy = self._b_d(X, Y, 2, 0), self._b_d(X, Y, 1, 1), self._b_d(X, Y, 0, 2)
        return np.cos(t) * np.stack([np.stack([xx, xy], -1), np.stack([xy, yy], -1)], -2)


def exact_solution(params: PhysParams | None = None) -> ExactSolution:
    return ExactSolution(params or PhysParams())


def _curl_scalar_grad(g):
    """Planar vector curl of a scalar given its gradient: (d_y a, -d_x a)."""
    return np.stack([g[..., 1], -g[..., 0]], -1)


def manufactured_forcing(t_new: float, t_old: float, dt: float, params: PhysParams, x,
                         exact: ExactSolution | None = None):
    """Volume sources making the reference fields solve the model.

    Returns ``(f_u, f_B, f_phi, f_omega)`` at points ``x`` for time
    ``t_new``. The momentum source matches the skew-symmetric convective
    form used by the stepper,
    ``rho u_t + (rho_t + div m) u / 2 + (m . grad) u`` with mass flux
    ``m = rho u - rho' M grad(omega)``. ``t_old`` and ``dt`` are accepted
    for interface symmetry; sources are evaluated at ``t_new``.
    """
    ex = exact or ExactSolution(params)
    P = params
    t = t_new
    x = np.asarray(x, dtype=float)

    ph = ex.phi(x, t)
    gph = ex.phi_grad(x, t)
    ph_t = ex.phi_t(x, t)
    gw = ex.omega_grad(x, t)
    lw = ex.omega_lap(x, t)
    u = ex.u(x, t)
    gu = ex.u_grad(x, t)
    hu = ex.u_hess(x, t)
    B = ex.B(x, t)
    gB = ex.B_grad(x, t)
    hB = ex.B_hess(x, t)

    rho = coeff_eval("density", P, ph)
    drho = P.slope("density")
    eta = coeff_eval("viscosity", P, ph)
    deta = P.slope("viscosity")
    sig = coeff_eval("conductivity", P, ph)
    dsig = P.slope("conductivity")
    mob = coeff_eval("mobility", P, ph)
    dmob = P.slope("mobility")

    div_u = gu[..., 0, 0] + gu[..., 1, 1]
    div_mob_grad_w = dmob * np.sum(gph * gw, -1) + mob * lw

    f_phi = ph_t + np.sum(u * gph, -1) + ph * div_u - div_mob_grad_w

    m = rho[..., None] * u - drho * mob[..., None] * gw
    div_m = drho * np.sum(gph * u, -1) + rho * div_u - drho * div_mob_grad_w
    rho_t = drho * ph_t
    conv = np.einsum("...id,...d->...i", gu, m)
    Du2 = gu + np.swapaxes(gu, -1, -2)
    lap_u = hu[..., 0, 0] + hu[..., 1, 1]
    grad_div_u = np.stack([hu[..., 0, 0, 0] + hu[..., 1, 1, 0], hu[..., 0, 0, 1] + hu[..., 1, 1, 1]], -1)
    div_visc = (deta * np.einsum("...id,...d->...i", Du2, gph)
                + eta[..., None] * (lap_u + grad_div_u))
    j = gB[..., 1, 0] - gB[..., 0, 1]
    lorentz = np.stack([j * B[..., 1], -j * B[..., 0]], -1) / P.mu
    g = np.asarray(P.gravity)
    f_u = (rho[..., None] * ex.u_t(x, t) + 0.5 * (rho_t + div_m)[..., None] * u + conv
           - div_visc + ex.p_grad(x, t) + lorentz
           + P.lam * ph[..., None] * gw - rho[..., None] * g)

    grad_j = np.stack([hB[..., 1, 0, 0] - hB[..., 0, 1, 0], hB[..., 1, 0, 1] - hB[..., 0, 1, 1]], -1)
    grad_j_over_sig = grad_j / sig[..., None] - (j * dsig / sig ** 2)[..., None] * gph
    div_B = gB[..., 0, 0] + gB[..., 1, 1]
    grad_div_B = np.stack([hB[..., 0, 0, 0] + hB[..., 1, 1, 0], hB[..., 0, 0, 1] + hB[..., 1, 1, 1]], -1)
    grad_div_over_sig = grad_div_B / sig[..., None] - (div_B * dsig / sig ** 2)[..., None] * gph
    # s = u x B = u1 B2 - u2 B1
    grad_s = (gu[..., 0, :] * B[..., 1, None] + u[..., 0, None] * gB[..., 1, :]
              - gu[..., 1, :] * B[..., 0, None] - u[..., 1, None] * gB[..., 0, :])
    f_B = (ex.B_t(x, t) + _curl_scalar_grad(grad_j_over_sig) / P.mu
           - grad_div_over_sig / P.mu - _curl_scalar_grad(grad_s))

    f_omega = np.zeros_like(ph)
    return f_u, f_B, f_phi, f_omega


# ---------------------------------------------------------------------------
# initial data


def spinodal_noise(n_nodes: int, seed: int, weights: np.ndarray | None = None) -> np.ndarray:
    """Uniform [-1, 1] nodal noise with zero mean.

    The arithmetic mean is removed, and, when nodal integration weights
    are supplied, so is the weighted mean, so the noise integrates to
    zero as a P1 field. The result is rescaled to stay inside [-1, 1].
    """
    rng = np.random.default_rng(seed)
    r = rng.uniform(-1.0, 1.0, n_nodes)
    basis = [np.ones(n_nodes)]
    if weights is not None:
        basis.append(np.asarray(weights, dtype=float))
    Q, _ = np.linalg.qr(np.column_stack(basis))
    r = r - Q @ (Q.T @ r)
    peak = np.abs(r).max()
    if peak > 1.0:
        r = r / peak
    return r


def bubble_profile(x, center, radius, epsilon):
    d = np.hypot(x[..., 0] - center[0], x[..., 1] - center[1])
    return np.tanh((radius - d) / (np.sqrt(2.0) * epsilon))


@dataclass
class InitialData:
    """Initial fields: callables of ``x`` or explicit nodal arrays."""

    phi: object
    u: object = None
    B: object = None
    p: object = None
    nodal_phi: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def initial_conditions(kind: str, params: PhysParams, seed: int = 0, mesh=None,
                       psi0: float = -0.05, amplitude: float = 0.001,
                       center=(0.5, 0.3), radius: float = 0.2, B0=(0.0, 1.0)) -> InitialData:
    zero_vec = lambda x: np.zeros(x.shape[:-1] + (2,))
    if kind == "spinodal":
        if mesh is None:
            raise ValueError("spinodal initial data needs the mesh nodes")
        from .fem import Space, P1_SCALAR, assemble_mass
        w = np.asarray(assemble_mass(Space(P1_SCALAR, mesh), mesh).sum(axis=1)).ravel()
        noise = spinodal_noise(mesh.n_nodes, seed, w)
        return InitialData(phi=None, u=zero_vec, B=zero_vec, nodal_phi=psi0 + amplitude * noise,
                           extra={"noise": noise})
    if kind == "bubble":
        b0 = np.asarray(B0, dtype=float)
        return InitialData(
            phi=lambda x: bubble_profile(x, center, radius, params.epsilon),
            u=zero_vec,
            B=lambda x: np.broadcast_to(b0, x.shape[:-1] + (2,)).copy())
    if kind == "converge":
        ex = ExactSolution(params)
        return InitialData(phi=lambda x: ex.phi(x, 0.0), u=lambda x: ex.u(x, 0.0),
                           B=lambda x: ex.B(x, 0.0), p=lambda x: ex.p(x, 0.0))
    raise ValueError(f"unknown experiment kind {kind!r}")
