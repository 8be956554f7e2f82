"""Coupled first-order stepper for (phi, omega, u, p, B).

All five fields are solved together by Newton's method at every step.
Coefficients (viscosity, conductivity, mobility, the lagged density) are
frozen at the previous level and evaluated on the clipped phase field.

The momentum row uses the skew-symmetric convective form

    ((rho^{k+1} + rho^k)/2 u - rho^k u^k) / dt
    + 1/2 (m . grad) u - 1/2 (m . grad v) . u,   m = rho^k u - rho' M^k grad(omega)

which coincides with the conservative form whenever the discrete mass
balance holds, and makes the kinetic-energy bookkeeping exact so that the
discrete energy law holds to solver precision for every dt.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

from . import fem
from . import sparse as sla
from .fem import FieldVec, MINI_VECTOR, P1_SCALAR, P1_VECTOR
from .mesh import Mesh, SIDES, dissection_order
from .physics import PhysParams, coeff_eval, cut_off

log = logging.getLogger(__name__)

FIELDS = ("phi", "omega", "vel", "pres", "mag")


class AssemblyError(FloatingPointError):
    pass


class NewtonError(RuntimeError):
    def __init__(self, message, history=()):
        super().__init__(f"{message}; residual history {['%.3e' % r for r in history]}")
        self.history = list(history)


class CoefficientBoundError(AssertionError):
    pass


class StepError(RuntimeError):
    """A time step failed; ``step`` is 1-based and ``cause`` the original error."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class SolverConfig:
    dt: float
    newton_tol: float = 1e-10
    newton_rtol: float = 1e-8
    newton_max: int = 20
    check_bounds: bool = False
    check_solve: bool = True
    jacobian_reuse: int = 0
    extrapolate: bool = False
    reuse_contraction: float = 0.25

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (self.newton_tol > 0 and self.newton_rtol > 0 and self.newton_max >= 1):
            raise ValueError("Newton tolerances must be positive")


@dataclass
class State:
    phi: FieldVec
    omega: FieldVec
    vel: FieldVec
    pres: FieldVec
    mag: FieldVec
    time: float = 0.0

    def copy(self) -> "State":
        return State(self.phi.copy(), self.omega.copy(), self.vel.copy(),
                     self.pres.copy(), self.mag.copy(), self.time)

    @property
    def mesh(self) -> Mesh:
        return self.phi.space.mesh


# ---------------------------------------------------------------------------
# boundary conditions


def _zero_vec(x, t):
    return np.zeros(np.shape(x)[:-1] + (2,))


@dataclass
class BCSet:
    """Dirichlet data for velocity and magnetic field.

    ``velocity`` maps a side to the constrained components (``(0, 1)`` for
    no-slip, ``(0,)`` for ``u1 = 0`` only). ``magnetic`` maps a side to
    ``"full"`` or ``"tangential"``. Values come from ``velocity_value`` /
    ``magnetic_value`` callables of ``(x, t)``; phi and omega carry natural
    conditions.
    """

    velocity: dict = field(default_factory=lambda: {s: (0, 1) for s in SIDES})
    magnetic: dict = field(default_factory=lambda: {s: "full" for s in SIDES})
    velocity_value: Callable = _zero_vec
    magnetic_value: Callable = _zero_vec

    @staticmethod
    def tangential_component(side: str) -> int:
        return 0 if side in ("Bottom", "Top") else 1


def no_slip_bcs(**kw) -> BCSet:
    return BCSet(**kw)


def bubble_bcs(b_far=(0.0, 1.0)) -> BCSet:
    """No-slip on top and bottom, u1 = 0 on the sides, tangential B from ``b_far``."""
    b = np.asarray(b_far, dtype=float)
    return BCSet(
        velocity={"Bottom": (0, 1), "Top": (0, 1), "Left": (0,), "Right": (0,)},
        magnetic={s: "tangential" for s in SIDES},
        magnetic_value=lambda x, t: np.broadcast_to(b, np.shape(x)[:-1] + (2,)).copy(),
    )


class Layout:
    """Offsets of each field in the monolithic unknown vector."""

    def __init__(self, mesh: Mesh):
        ctx = fem.context(mesh)
        self.spaces = {
            "phi": ctx.space(P1_SCALAR),
            "omega": ctx.space(P1_SCALAR),
            "vel": ctx.space(MINI_VECTOR),
            "pres": ctx.space(P1_SCALAR),
            "mag": ctx.space(P1_VECTOR),
        }
        self.offsets = {}
        off = 0
        for name in FIELDS:
            self.offsets[name] = off
            off += self.spaces[name].dof_count
        self.mult = off
        self.size = off + 1

    def slice(self, name: str) -> slice:
        o = self.offsets[name]
        return slice(o, o + self.spaces[name].dof_count)

    def pack(self, state: State) -> np.ndarray:
        x = np.zeros(self.size)
        for name in FIELDS:
            x[self.slice(name)] = getattr(state, name).coeffs
        return x

    def unpack(self, x: np.ndarray, time: float) -> State:
        return State(*(FieldVec(self.spaces[n], x[self.slice(n)].copy()) for n in FIELDS), time=time)


def boundary_constraints(bcs: BCSet, layout: Layout, mesh: Mesh, t: float):
    """Global constrained dofs and their values at time ``t``.

    Sides are visited in the order Bottom, Top, Left, Right and the first
    prescription of a dof wins; disagreeing later values are logged.
    """
    assigned: dict[int, float] = {}
    vel, mag = layout.spaces["vel"], layout.spaces["mag"]
    for side in SIDES:
        nodes = mesh.side_nodes(side)
        if not len(nodes):
            continue
        pts = mesh.nodes[nodes]
        jobs = []
        if side in bcs.velocity:
            vals = np.asarray(bcs.velocity_value(pts, t))
            for c in bcs.velocity[side]:
                jobs.append((layout.offsets["vel"] + vel.nodal_dofs(nodes, c), vals[:, c]))
        if side in bcs.magnetic:
            vals = np.asarray(bcs.magnetic_value(pts, t))
            comps = (0, 1) if bcs.magnetic[side] == "full" else (bcs.tangential_component(side),)
            for c in comps:
                jobs.append((layout.offsets["mag"] + mag.nodal_dofs(nodes, c), vals[:, c]))
        for dofs, values in jobs:
            for d, v in zip(dofs.tolist(), values.tolist()):
                if d in assigned:
                    if abs(assigned[d] - v) > 1e-14 * max(1.0, abs(v)):
                        log.info("conflicting boundary value at dof %d on %s ignored (%g vs %g)",
                                 d, side, v, assigned[d])
                    continue
                assigned[d] = v
    dofs = np.fromiter(assigned.keys(), dtype=np.int64, count=len(assigned))
    vals = np.fromiter(assigned.values(), dtype=float, count=len(assigned))
    order = np.argsort(dofs)
    return dofs[order], vals[order]


def apply_bcs(A: sp.spmatrix, r: np.ndarray, dofs: np.ndarray):
    """Eliminate constrained dofs symmetrically: zero their rows and
    columns, put 1 on the diagonal and 0 in the residual.

    Valid for Newton corrections, whose constrained entries vanish once the
    iterate carries the boundary values.
    """
    n = A.shape[0]
    keep = np.ones(n)
    keep[dofs] = 0.0
    D = sp.diags(keep)
    I = sp.diags(1.0 - keep)
    A = (D @ A @ D + I).tocsr()
    r = r.copy()
    r[dofs] = 0.0
    return A, r


# ---------------------------------------------------------------------------
# assembly


@dataclass
class BoundStats:
    """Extremes of every coefficient seen during assembly."""

    lo: dict = field(default_factory=dict)
    hi: dict = field(default_factory=dict)
    systems: int = 0

    def update(self, name, values):
        lo, hi = float(np.min(values)), float(np.max(values))
        self.lo[name] = min(self.lo.get(name, np.inf), lo)
        self.hi[name] = max(self.hi.get(name, -np.inf), hi)


@dataclass
class Frozen:
    """Quantities at quadrature points that stay fixed during one step."""

    phi: np.ndarray
    u: np.ndarray
    B: np.ndarray
    rho: np.ndarray
    eta: np.ndarray
    sigma: np.ndarray
    mob: np.ndarray
    forcing: tuple | None


def frozen_coefficients(state_k: State, params: PhysParams) -> dict:
    """Level-k coefficients on the clipped phase field at quadrature points."""
    phi, _ = fem.eval_at_quadrature(state_k.phi)
    ph = cut_off(phi)
    return {
        "phi": phi,
        "rho": coeff_eval("density", params, ph),
        "eta": coeff_eval("viscosity", params, ph),
        "sigma": coeff_eval("conductivity", params, ph),
        "mob": coeff_eval("mobility", params, ph),
    }


def density(phi_q: np.ndarray, params: PhysParams) -> np.ndarray:
    return coeff_eval("density", params, cut_off(phi_q))


def _bil(a, b):
    """Element matrix ``sum_q a[t,q,i] b[t,q,j]`` (weights folded into ``a``)."""
    return np.matmul(np.swapaxes(a, 1, 2), b)


def _bil_g(ga, gb, wt):
    """``sum_q wt (grad a_i . grad b_j)`` for gradient tables ``(T,Q,n,2)``."""
    return _bil(ga[..., 0] * wt[..., None], gb[..., 0]) + _bil(ga[..., 1] * wt[..., None], gb[..., 1])


class CoupledSystem:
    """Residual and Jacobian of one time step of the coupled scheme."""

    def __init__(self, mesh: Mesh, params: PhysParams, cfg: SolverConfig, bcs: BCSet,
                 forcing: Callable | None = None):
        self.mesh = mesh
        self.params = params
        self.cfg = cfg
        self.bcs = bcs
        self.forcing = forcing
        self.ctx = fem.context(mesh)
        self.layout = Layout(mesh)
        self.S = self.ctx.basis(P1_SCALAR)
        self.U = self.ctx.basis(MINI_VECTOR)
        self.Bb = self.ctx.basis(P1_VECTOR)
        self.dx = self.ctx.geom.dx
        self.xq = self.ctx.geom.x
        M = fem.assemble_mass(self.layout.spaces["pres"], mesh)
        self.weights = np.asarray(M.sum(axis=1)).ravel()
        self.stats = BoundStats()
        self.lu = None
        self.lu_age = 0
        vel = self.layout.spaces["vel"]
        tri = np.arange(mesh.n_triangles)
        o = self.layout.offsets["vel"] + mesh.n_nodes + tri
        self.bubble_blocks = np.stack([o, o + vel.n_scalar], 1)
        self.order = self._elimination_order()
        self._rot = (np.array([0.0, -1.0]), np.array([1.0, 0.0]))
        self._build_pattern()

    def _elimination_order(self) -> np.ndarray:
        """All unknowns of a node together, nodes in nested dissection order,
        bubbles and the multiplier last."""
        lay, nn = self.layout, self.mesh.n_nodes
        rank = np.empty(nn, dtype=np.int64)
        rank[dissection_order(self.mesh)] = np.arange(nn)
        key = np.full(lay.size, nn, dtype=np.int64)
        key[lay.mult] = nn + 1
        for name in FIELDS:
            sp_ = lay.spaces[name]
            for c in range(2 if sp_.is_vector else 1):
                key[lay.offsets[name] + sp_.nodal_dofs(np.arange(nn), c)] = rank
        return np.lexsort((np.arange(lay.size), key))

    # -- sparsity ---------------------------------------------------------------
    _BLOCKS = (
        ("vel", "vel"), ("vel", "phi"), ("vel", "omega"), ("vel", "pres"), ("vel", "mag"),
        ("pres", "vel"),
        ("mag", "mag"), ("mag", "vel"),
        ("phi", "phi"), ("phi", "vel"), ("phi", "omega"),
        ("omega", "omega"), ("omega", "phi"),
    )

    def _dofs(self, name):
        lay = self.layout
        return lay.spaces[name].cell_dofs + lay.offsets[name]

    def _build_pattern(self):
        rows, cols = [], []
        for r, c in self._BLOCKS:
            dr, dc = self._dofs(r), self._dofs(c)
            rows.append(np.broadcast_to(dr[:, :, None], (len(dr), dr.shape[1], dc.shape[1])).ravel())
            cols.append(np.broadcast_to(dc[:, None, :], (len(dr), dr.shape[1], dc.shape[1])).ravel())
        p = self.layout.offsets["pres"] + np.arange(self.layout.spaces["pres"].dof_count)
        m = np.full_like(p, self.layout.mult)
        rows += [p, m]
        cols += [m, p]
        n = self.layout.size
        self.pattern = sla.Pattern(np.concatenate(rows), np.concatenate(cols), (n, n))

    # -- evaluation -------------------------------------------------------------
    def freeze(self, state_k: State, t_new: float) -> Frozen:
        co = frozen_coefficients(state_k, self.params)
        u, _ = self.U.evaluate(state_k.vel.coeffs)
        B, _ = self.Bb.evaluate(state_k.mag.coeffs)
        forcing = self.forcing(self.xq, t_new) if self.forcing is not None else None
        if self.cfg.check_bounds:
            self._check_bounds(co)
        return Frozen(co["phi"], u, B, co["rho"], co["eta"], co["sigma"], co["mob"], forcing)

    def _check_bounds(self, co):
        P = self.params
        for kind, key in (("density", "rho"), ("viscosity", "eta"),
                          ("conductivity", "sigma"), ("mobility", "mob")):
            a, b = sorted(P.pair(kind))
            v = co[key]
            self.stats.update(kind, v)
            tol = 1e-14 * max(abs(a), abs(b))
            if v.min() < a - tol or v.max() > b + tol:
                raise CoefficientBoundError(
                    f"{kind} outside [{a}, {b}]: range [{v.min()}, {v.max()}]")
        self.stats.systems += 1

    def fields(self, x: np.ndarray) -> dict:
        lay = self.layout
        phi, gphi = self.S.evaluate(x[lay.slice("phi")])
        om, gom = self.S.evaluate(x[lay.slice("omega")])
        u, gu = self.U.evaluate(x[lay.slice("vel")])
        p, _ = self.S.evaluate(x[lay.slice("pres")])
        B, gB = self.Bb.evaluate(x[lay.slice("mag")])
        return dict(phi=phi, gphi=gphi, om=om, gom=gom, u=u, gu=gu, p=p, B=B, gB=gB,
                    ell=x[lay.mult])

    def assemble(self, x: np.ndarray, fz: Frozen, jacobian: bool = True):
        """Residual (and Jacobian) at iterate ``x``, before boundary elimination.

        Vector-valued blocks are built component by component from the
        scalar basis tables; every element integral is a batched product
        ``sum_q a[t,q,i] b[t,q,j]``.
        """
        P, dt, w = self.params, self.cfg.dt, self.dx
        f = self.fields(x)
        phi, gphi, om, gom = f["phi"], f["gphi"], f["om"], f["gom"]
        u, gu, p, B, gB = f["u"], f["gu"], f["p"], f["B"], f["gB"]
        rho_n = density(phi, P)
        drho = P.slope("density")
        rho_k, eta_k, sig_k, mob_k, phik = fz.rho, fz.eta, fz.sigma, fz.mob, fz.phi
        if self.cfg.check_bounds:
            a, b = sorted(P.pair("density"))
            self.stats.update("density", rho_n)
            tol = 1e-14 * max(abs(a), abs(b))
            if rho_n.min() < a - tol or rho_n.max() > b + tol:
                raise CoefficientBoundError("density of Newton iterate out of bounds")

        m = rho_k[..., None] * u - (drho * mob_k)[..., None] * gom
        curlB = gB[..., 1, 0] - gB[..., 0, 1]
        divB = gB[..., 0, 0] + gB[..., 1, 1]
        divu = gu[..., 0, 0] + gu[..., 1, 1]
        Bk_rot = np.stack([fz.B[..., 1], -fz.B[..., 0]], -1)  # v x Bk = v . Bk_rot
        s_k = u[..., 0] * Bk_rot[..., 0] + u[..., 1] * Bk_rot[..., 1]
        inv_ms = 1.0 / (P.mu * sig_k)
        g = np.asarray(P.gravity)
        if fz.forcing is not None:
            fu, fB, fphi, fom = fz.forcing
        else:
            fu = fB = np.zeros(2)
            fphi = fom = 0.0

        uv, ug = self.U.scalar_val, self.U.scalar_grad  # (T,Q,4), (T,Q,4,2)
        sv, sg = self.S.val, self.S.grad  # (T,Q,3), (T,Q,3,2)
        rot = self._rot  # curl(psi e_c) = rot[c] . grad psi

        # residual ---------------------------------------------------------------
        Fu = ((0.5 * (rho_n + rho_k)[..., None] * u - rho_k[..., None] * fz.u) / dt
              + 0.5 * (gu[..., 0] * m[..., None, 0] + gu[..., 1] * m[..., None, 1])
              + (curlB / P.mu)[..., None] * Bk_rot
              + P.lam * phik[..., None] * gom
              - rho_k[..., None] * g - fu) * w[..., None]
        # -m_d u_c / 2 + 2 eta D(u)_cd - p delta_cd, times the weights
        Gu = (u[..., :, None] * ((-0.5 * w)[..., None] * m)[..., None, :]
              + (eta_k * w)[..., None, None] * (gu + np.swapaxes(gu, -1, -2)))
        pw = p * w
        Gu[..., 0, 0] -= pw
        Gu[..., 1, 1] -= pw
        U, Sb = self.U, self.S
        Ru = np.concatenate([U.test_val(Fu[..., c]) + U.test_grad(Gu[..., c, :]) for c in range(2)], 1)
        Rp = -Sb.test_val(divu * w)
        FB = ((B - fz.B) / dt - fB) * w[..., None]
        X = (curlB * inv_ms - s_k) * w
        Y = divB * inv_ms * w
        # test functions psi e_c: curl = rot[c] . grad psi, div = d_c psi
        RB = np.concatenate([Sb.test_val(FB[..., 0]) + Sb.test_grad(np.stack([Y, -X], -1)),
                             Sb.test_val(FB[..., 1]) + Sb.test_grad(np.stack([X, Y], -1))], 1)
        Rphi = (Sb.test_val(((phi - phik) / dt - fphi) * w)
                + Sb.test_grad((mob_k[..., None] * gom - phik[..., None] * u) * w[..., None]))
        Rom = (Sb.test_val((om - P.gamma / P.epsilon * (phi * phi * phi - phik) - fom) * w)
               - P.gamma * P.epsilon * Sb.test_grad(gphi * w[..., None]))

        lay = self.layout
        R = np.zeros(lay.size)
        for name, elem in (("vel", Ru), ("pres", Rp), ("mag", RB), ("phi", Rphi), ("omega", Rom)):
            R += np.bincount(self._dofs(name).ravel(), weights=elem.ravel(), minlength=lay.size)
        ps = lay.slice("pres")
        R[ps] -= f["ell"] * self.weights
        R[lay.mult] = -self.weights @ x[ps]
        self._check_finite(R, "residual")
        if not jacobian:
            return R

        # Jacobian ---------------------------------------------------------------
        T = w.shape[0]
        mg = np.einsum("tqjd,tqd->tqj", ug, m)
        Kd = (_bil(uv * (0.5 * (rho_n + rho_k) / dt * w)[..., None], uv)
              + _bil(uv * (0.5 * w)[..., None], mg) - _bil(mg * (0.5 * w)[..., None], uv)
              + _bil_g(ug, ug, eta_k * w))
        J_uu = np.zeros((T, 8, 8))
        hr = 0.5 * rho_k * w
        ew = eta_k * w
        for c in range(2):
            for d in range(2):
                blk = (_bil(uv * (hr * gu[..., c, d])[..., None], uv)
                       - _bil(ug[..., d] * (hr * u[..., c])[..., None], uv)
                       + _bil(ug[..., d] * ew[..., None], ug[..., c]))
                if c == d:
                    blk = blk + Kd
                J_uu[:, 4 * c:4 * c + 4, 4 * d:4 * d + 4] = blk
        coef = 0.5 * drho * mob_k * w
        hdr = np.where(np.abs(phi) < 1.0, 0.5 * drho / dt, 0.0) * w
        J_uphi = np.concatenate([_bil(uv * (hdr * u[..., c])[..., None], sv) for c in range(2)], 1)
        J_uom = np.concatenate([
            -_bil(uv * coef[..., None], np.einsum("tqjd,tqd->tqj", sg, gu[..., c, :]))
            + _bil_g(ug, sg, coef * u[..., c])
            + _bil(uv * (P.lam * phik * w)[..., None], sg[..., c])
            for c in range(2)], 1)
        J_up = np.concatenate([-_bil(ug[..., c] * w[..., None], sv) for c in range(2)], 1)
        curl_s = [np.einsum("tqjd,d->tqj", sg, rot[c]) for c in range(2)]
        J_uB = np.concatenate([
            np.concatenate([_bil(uv * (w / P.mu * Bk_rot[..., c])[..., None], curl_s[d])
                            for d in range(2)], 2)
            for c in range(2)], 1)
        J_pu = np.concatenate([-_bil(sv * w[..., None], ug[..., d]) for d in range(2)], 2)
        mass_s = _bil(sv * w[..., None], sv)
        wm = w * inv_ms
        J_BB = np.concatenate([
            np.concatenate([(mass_s / dt if c == d else 0.0)
                            + _bil(curl_s[c] * wm[..., None], curl_s[d])
                            + _bil(sg[..., c] * wm[..., None], sg[..., d])
                            for d in range(2)], 2)
            for c in range(2)], 1)
        J_Bu = np.concatenate([
            np.concatenate([-_bil(curl_s[c] * w[..., None], uv * Bk_rot[..., d, None])
                            for d in range(2)], 2)
            for c in range(2)], 1)
        J_phiphi = mass_s / dt
        J_phiu = np.concatenate([-_bil(sg[..., d] * (phik * w)[..., None], uv) for d in range(2)], 2)
        J_phiom = _bil_g(sg, sg, mob_k * w)
        J_omphi = (-P.gamma * P.epsilon * _bil_g(sg, sg, w)
                   - 3.0 * P.gamma / P.epsilon * _bil(sv * (phi ** 2 * w)[..., None], sv))
        blocks = (J_uu, J_uphi, J_uom, J_up, J_uB, J_pu, J_BB, J_Bu,
                  J_phiphi, J_phiu, J_phiom, mass_s, J_omphi)
        vals = np.concatenate([b.ravel() for b in blocks]
                              + [-self.weights, -self.weights])
        self._check_finite(vals, "Jacobian")
        return R, self.pattern.matrix(vals)

    @staticmethod
    def _check_finite(arr, what):
        if not np.all(np.isfinite(arr)):
            raise AssemblyError(f"non-finite entries in {what}")


def assemble_newton_system(state_k: State, iterate: State, params: PhysParams, cfg: SolverConfig,
                           bcs: BCSet, forcing: Callable | None = None,
                           system: CoupledSystem | None = None):
    """Jacobian and residual at ``iterate`` with boundary rows eliminated.

    A Newton correction solves ``J d = -r``.
    """
    system = system or CoupledSystem(state_k.mesh, params, cfg, bcs, forcing)
    t_new = state_k.time + cfg.dt
    fz = system.freeze(state_k, t_new)
    x = system.layout.pack(iterate)
    r, J = system.assemble(x, fz)
    dofs, _ = boundary_constraints(bcs, system.layout, state_k.mesh, t_new)
    return apply_bcs(J, r, dofs)


@dataclass
class StepInfo:
    iterations: int
    history: list


def newton_step(state_k: State, params: PhysParams, cfg: SolverConfig, bcs: BCSet,
                forcing: Callable | None = None, system: CoupledSystem | None = None,
                constraints=None, guess: State | None = None) -> tuple[State, StepInfo]:
    """Advance one step; the initial Newton iterate is ``state_k`` unless
    a ``guess`` is supplied.

    With ``cfg.jacobian_reuse = 0`` every iteration is a full Newton step.
    A positive value keeps the LU factors of the last Jacobian for up to
    that many time steps (a chord iteration), refreshing them whenever
    the residual contracts by less than ``cfg.reuse_contraction``. The
    stopping test is the same in both modes.
    """
    system = system or CoupledSystem(state_k.mesh, params, cfg, bcs, forcing)
    lay = system.layout
    t_new = state_k.time + cfg.dt
    fz = system.freeze(state_k, t_new)
    if constraints is None:
        constraints = boundary_constraints(bcs, lay, state_k.mesh, t_new)
    dofs, vals = constraints
    x = lay.pack(guess if guess is not None else state_k)
    x[dofs] = vals
    reuse = cfg.jacobian_reuse > 0
    if not reuse:
        system.lu = None
    history = []
    for it in range(cfg.newton_max + 1):
        stale = (system.lu is None or not reuse
                 or (it > 1 and history[-1] > cfg.reuse_contraction * history[-2]))
        if stale and it < cfg.newton_max:
            r, J = system.assemble(x, fz)
            J, r = apply_bcs(J, r, dofs)
        else:
            r = system.assemble(x, fz, jacobian=False)
            r[dofs] = 0.0
        rn = float(np.abs(r).max())
        history.append(rn)
        if rn <= cfg.newton_tol:
            break
        if it == cfg.newton_max:
            raise NewtonError(f"Newton did not converge in {cfg.newton_max} iterations", history)
        if stale:
            system.lu = sla.Factorization(J, system.bubble_blocks, system.order)
            system.lu_age = 0
            fresh = True
        else:
            fresh = False
        delta = system.lu.solve(-r, check=cfg.check_solve and fresh)
        x = x + delta
        if np.abs(delta).max() <= cfg.newton_rtol * (1.0 + np.abs(x).max()):
            it += 1
            break
    if reuse:
        system.lu_age += 1
        if system.lu_age >= cfg.jacobian_reuse:
            system.lu = None
    return lay.unpack(x, t_new), StepInfo(it, history)


def initial_state(mesh: Mesh, params: PhysParams, data, bcs: BCSet | None = None) -> State:
    """Project initial data into the discrete spaces.

    Velocity and magnetic field are projected with their boundary values
    imposed; the chemical potential is the discrete variational derivative
    of the mixing energy at the projected phase field.
    """
    lay = Layout(mesh)
    sp_phi, sp_u, sp_B = lay.spaces["phi"], lay.spaces["vel"], lay.spaces["mag"]
    if data.nodal_phi is not None:
        phi = FieldVec(sp_phi, np.asarray(data.nodal_phi, dtype=float))
    else:
        phi = fem.l2_project(sp_phi, mesh, data.phi)
    bcs = bcs or BCSet()
    dofs, vals = boundary_constraints(bcs, lay, mesh, 0.0)
    uo, bo = lay.offsets["vel"], lay.offsets["mag"]
    in_u = (dofs >= uo) & (dofs < uo + sp_u.dof_count)
    in_b = (dofs >= bo) & (dofs < bo + sp_B.dof_count)
    vel = _project_constrained(sp_u, mesh, data.u, dofs[in_u] - uo, vals[in_u])
    mag = _project_constrained(sp_B, mesh, data.B, dofs[in_b] - bo, vals[in_b])
    if data.p is not None:
        pres = fem.l2_project(sp_phi, mesh, data.p)
        w = np.asarray(fem.assemble_mass(sp_phi, mesh).sum(axis=1)).ravel()
        pres.coeffs -= (w @ pres.coeffs) / w.sum()
    else:
        pres = FieldVec(sp_phi, np.zeros(sp_phi.dof_count))
    omega = chemical_potential(phi, params)
    return State(phi, omega, vel, pres, mag, 0.0)


def _project_constrained(space, mesh, f, dofs, values) -> FieldVec:
    if f is None:
        return FieldVec(space, np.zeros(space.dof_count))
    ctx = fem.context(mesh)
    vals = np.broadcast_to(np.asarray(f(ctx.geom.x), dtype=float), ctx.geom.shape + (2,))
    if not np.any(vals) and not np.any(values):
        return FieldVec(space, np.zeros(space.dof_count))
    b = fem.load_vector(space, mesh, vals)
    M = fem.assemble_mass(space, mesh)
    c = np.zeros(space.dof_count)
    c[dofs] = values
    b = b - M @ c
    M, b = apply_bcs(M, b, dofs)
    b[dofs] = values
    return FieldVec(space, sla.solve_direct(M, b))


def chemical_potential(phi: FieldVec, params: PhysParams) -> FieldVec:
    """Discrete ``omega`` with ``(omega, chi) = g e (grad phi, grad chi) + g/e (phi^3 - phi, chi)``."""
    space, mesh = phi.space, phi.space.mesh
    ph, _ = fem.eval_at_quadrature(phi)
    b = (params.gamma * params.epsilon * (fem.assemble_stiffness(space, mesh) @ phi.coeffs)
         + params.gamma / params.epsilon * fem.load_vector(space, mesh, ph ** 3 - ph))
    return FieldVec(space, sla.solve_direct(fem.assemble_mass(space, mesh), b))


def steps_for(t_end: float, dt: float) -> int:
    n = int(round(t_end / dt))
    if n < 0 or abs(n * dt - t_end) > 1e-12:
        raise ValueError(f"t_end={t_end} is not a multiple of dt={dt}")
    return n


def run(initial: State, params: PhysParams, cfg: SolverConfig, bcs: BCSet, t_end: float,
        observers: Iterable[Callable] = (), forcing: Callable | None = None,
        system: CoupledSystem | None = None, full_diagnostics: bool = True):
    """Time loop from ``initial.time`` to ``t_end``.

    Each observer is called as ``obs(step, state_k, state_k1, record)``.
    Returns the final state and the list of per-step diagnostics records.
    """
    from .diagnostics import discrete_energy, step_record

    n = steps_for(t_end - initial.time, cfg.dt)
    system = system or CoupledSystem(initial.mesh, params, cfg, bcs, forcing)
    observers = list(observers)
    state = initial
    prev = None
    e_prev = discrete_energy(initial, params)
    records = []
    for k in range(n):
        guess = None
        if cfg.extrapolate and prev is not None:
            lay = system.layout
            guess = lay.unpack(2.0 * lay.pack(state) - lay.pack(prev), state.time + cfg.dt)
        try:
            new, info = newton_step(state, params, cfg, bcs, forcing, system, guess=guess)
        except (NewtonError, sla.SingularMatrixError, sla.SolveAccuracyError, AssemblyError,
                CoefficientBoundError) as exc:
            raise StepError(k + 1, exc) from exc
        rec = step_record(k + 1, state, new, params, cfg.dt, info, e_prev, full_diagnostics)
        e_prev = rec.energy
        records.append(rec)
        for obs in observers:
            obs(k + 1, state, new, rec)
        prev, state = state, new
    return state, records
