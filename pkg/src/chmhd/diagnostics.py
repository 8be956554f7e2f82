"""Energies, dissipation, mass, error norms and bubble statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import fem
from .physics import ExactSolution, PhysParams, coeff_eval, cut_off

ENERGY_KEYS = ("kinetic", "magnetic", "gradient", "potential")
DISSIPATION_KEYS = (
    "kinetic_increment", "viscous", "magnetic_increment", "ohmic", "mobility",
    "gradient_increment", "potential_increment_sq", "potential_increment_cubic",
    "potential_increment_linear",
)


class EmptyRegionError(ValueError):
    pass


def _q(fieldvec):
    return fem.eval_at_quadrature(fieldvec)


def discrete_energy(state, params: PhysParams) -> dict:
    """Kinetic, magnetic, gradient and double-well energy of a state.

    The kinetic part uses the density of the clipped phase field.
    """
    mesh = state.mesh
    phi, gphi = _q(state.phi)
    u, _ = _q(state.vel)
    B, _ = _q(state.mag)
    rho = coeff_eval("density", params, cut_off(phi))
    P = params
    out = {
        "kinetic": 0.5 * fem.integrate(mesh, rho * np.sum(u * u, -1)),
        "magnetic": 0.5 / P.mu * fem.integrate(mesh, np.sum(B * B, -1)),
        "gradient": 0.5 * P.gamma * P.epsilon * fem.integrate(mesh, np.sum(gphi * gphi, -1)),
        "potential": 0.25 * P.gamma / P.epsilon * fem.integrate(mesh, (phi ** 2 - 1.0) ** 2),
    }
    out["total"] = sum(out[k] for k in ENERGY_KEYS)
    return out


def mass(state) -> float:
    phi, _ = _q(state.phi)
    return fem.integrate(state.mesh, phi)


def dissipation_terms(state_k, state_k1, params: PhysParams, dt: float) -> dict:
    """Non-negative terms that close the discrete energy balance of one step.

    Without body forces, ``E(k+1) - E(k) + sum(terms) = 0`` up to solver
    precision when the velocity and magnetic field vanish on the boundary
    and the capillary coupling coefficient equals one.
    """
    P, mesh = params, state_k.mesh
    phik, _ = _q(state_k.phi)
    ph = cut_off(phik)
    rho = coeff_eval("density", P, ph)
    eta = coeff_eval("viscosity", P, ph)
    sig = coeff_eval("conductivity", P, ph)
    mob = coeff_eval("mobility", P, ph)
    phi, gphi = _q(state_k1.phi)
    _, gphik = _q(state_k.phi)
    u, gu = _q(state_k1.vel)
    uk, _ = _q(state_k.vel)
    B, gB = _q(state_k1.mag)
    Bk, _ = _q(state_k.mag)
    _, gw = _q(state_k1.omega)
    Du = 0.5 * (gu + np.swapaxes(gu, -1, -2))
    curl = gB[..., 1, 0] - gB[..., 0, 1]
    div = gB[..., 0, 0] + gB[..., 1, 1]
    I = lambda v: fem.integrate(mesh, v)
    ge, g_e = P.gamma * P.epsilon, P.gamma / P.epsilon
    dphi = phi - phik
    return {
        "kinetic_increment": 0.5 * I(rho * np.sum((u - uk) ** 2, -1)),
        "viscous": 2.0 * dt * I(eta * np.sum(Du * Du, (-1, -2))),
        "magnetic_increment": 0.5 / P.mu * I(np.sum((B - Bk) ** 2, -1)),
        "ohmic": dt / P.mu ** 2 * I((curl ** 2 + div ** 2) / sig),
        "mobility": dt * I(mob * np.sum(gw * gw, -1)),
        "gradient_increment": 0.5 * ge * I(np.sum((gphi - gphik) ** 2, -1)),
        "potential_increment_sq": 0.25 * g_e * I((phi ** 2 - phik ** 2) ** 2),
        "potential_increment_cubic": 0.5 * g_e * I(phi ** 2 * dphi ** 2),
        "potential_increment_linear": 0.5 * g_e * I(dphi ** 2),
    }


def divergence_residual(state) -> float:
    """Largest entry of the discrete continuity residual ``(div u, q_i)``."""
    _, gu = _q(state.vel)
    b = fem.load_vector(state.pres.space, state.mesh, gu[..., 0, 0] + gu[..., 1, 1])
    return float(np.abs(b).max())


@dataclass
class DiagnosticsRecord:
    step: int
    time: float
    energy: dict
    mass: float
    dissipation: dict
    identity_residual: float
    newton_iterations: int
    residual_history: list
    div_residual: float
    phi_min: float
    phi_max: float
    extra: dict = field(default_factory=dict)

    def flat(self) -> dict:
        row = {"step": self.step, "time": self.time, "mass": self.mass,
               "identity_residual": self.identity_residual,
               "newton_iterations": self.newton_iterations,
               "div_residual": self.div_residual,
               "phi_min": self.phi_min, "phi_max": self.phi_max}
        row.update({f"energy_{k}": v for k, v in self.energy.items()})
        row.update({f"diss_{k}": v for k, v in self.dissipation.items()})
        row.update(self.extra)
        return row

    def as_dict(self) -> dict:
        return asdict(self)


def step_record(step, state_k, state_k1, params, dt, info, e_prev: dict | None = None,
                full: bool = True) -> DiagnosticsRecord:
    """Diagnostics of one step.

    With ``full=False`` the dissipation terms are skipped and the identity
    residual is NaN; used where the balance does not hold (body forces,
    inhomogeneous boundary data).
    """
    e0 = e_prev if e_prev is not None else discrete_energy(state_k, params)
    e1 = discrete_energy(state_k1, params)
    diss = dissipation_terms(state_k, state_k1, params, dt) if full else {}
    c = state_k1.phi.coeffs
    return DiagnosticsRecord(
        step=step, time=state_k1.time, energy=e1, mass=mass(state_k1), dissipation=diss,
        identity_residual=e1["total"] - e0["total"] + sum(diss.values()) if full else float("nan"),
        newton_iterations=info.iterations, residual_history=list(info.history),
        div_residual=divergence_residual(state_k1),
        phi_min=float(c.min()), phi_max=float(c.max()))


def error_norms(state, exact: ExactSolution, t: float) -> dict:
    """L2 errors of every field and H1 seminorm errors of phi, omega, u, B.

    Pressures are compared after removing their means.
    """
    mesh = state.mesh
    x = fem.context(mesh).geom.x
    I = lambda v: np.sqrt(max(fem.integrate(mesh, v), 0.0))
    out = {}
    for name, fv, ev, eg in (
        ("phi", state.phi, exact.phi, exact.phi_grad),
        ("omega", state.omega, exact.omega, exact.omega_grad),
        ("u", state.vel, exact.u, exact.u_grad),
        ("B", state.mag, exact.B, exact.B_grad),
    ):
        v, g = _q(fv)
        dv = v - ev(x, t)
        dg = g - eg(x, t)
        out[f"{name}_L2"] = I(dv ** 2 if dv.ndim == 2 else np.sum(dv ** 2, -1))
        out[f"{name}_H1"] = I(np.sum(dg ** 2, tuple(range(2, dg.ndim))))
    p, _ = _q(state.pres)
    pe = exact.p(x, t)
    area = mesh.rect.area
    dp = (p - fem.integrate(mesh, p) / area) - (pe - fem.integrate(mesh, pe) / area)
    out["p_L2"] = I(dp ** 2)
    return out


def eoc(errors, hs) -> list:
    """Observed orders ``log(e_i / e_{i+1}) / log(h_i / h_{i+1})``.

    A rate involving a non-positive error is undefined and returned as None.
    """
    e = np.asarray(errors, dtype=float)
    h = np.asarray(hs, dtype=float)
    if e.shape != h.shape or len(e) < 2:
        raise ValueError("need matching error and mesh-size sequences of length >= 2")
    out = []
    for i in range(len(e) - 1):
        if e[i] > 0 and e[i + 1] > 0:
            out.append(float(np.log(e[i] / e[i + 1]) / np.log(h[i] / h[i + 1])))
        else:
            out.append(None)
    return out


def bubble_centroid(state) -> tuple[float, float]:
    """Centroid of the region ``phi > 0``, integrated at quadrature points."""
    mesh = state.mesh
    phi, _ = _q(state.phi)
    ind = (phi > 0.0).astype(float)
    vol = fem.integrate(mesh, ind)
    if vol <= 0.0:
        raise EmptyRegionError("no region with phi > 0")
    x = fem.context(mesh).geom.x
    return (fem.integrate(mesh, ind * x[..., 0]) / vol, fem.integrate(mesh, ind * x[..., 1]) / vol)


def bubble_stats(state) -> dict:
    """Centroid, area and vertical/horizontal extent ratio of ``phi > 0``."""
    mesh = state.mesh
    phi, _ = _q(state.phi)
    ind = phi > 0.0
    vol = fem.integrate(mesh, ind.astype(float))
    cx, cy = bubble_centroid(state)
    pts = fem.context(mesh).geom.x[ind]
    width = pts[:, 0].max() - pts[:, 0].min()
    height = pts[:, 1].max() - pts[:, 1].min()
    return {"centroid_x": cx, "centroid_y": cy, "area": vol,
            "aspect": height / width if width > 0 else float("inf")}
