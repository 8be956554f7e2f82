"""P1 / MINI finite element spaces, quadrature and vectorised assembly.

Every triangle is processed at once: basis tables carry a leading
``(n_triangles, n_quad)`` shape and element matrices are produced with
``einsum`` before being scattered into a sparse matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh
from . import sparse as sla

P1_SCALAR = "P1Scalar"
P1_VECTOR = "P1Vector2"
MINI_VECTOR = "MiniVector2"
KINDS = (P1_SCALAR, P1_VECTOR, MINI_VECTOR)


@dataclass(frozen=True)
class QuadRule:
    points: np.ndarray  # (nq, 3) barycentric
    weights: np.ndarray  # (nq,), sums to 1/2

    @property
    def size(self) -> int:
        return len(self.weights)


def _degree5_rule() -> QuadRule:
    s15 = np.sqrt(15.0)
    a1 = (6.0 - s15) / 21.0
    a2 = (6.0 + s15) / 21.0
    w0 = 9.0 / 40.0
    w1 = (155.0 - s15) / 1200.0
    w2 = (155.0 + s15) / 1200.0
    pts = [(1 / 3, 1 / 3, 1 / 3)]
    wts = [w0]
    for a, w in ((a1, w1), (a2, w2)):
        b = 1.0 - 2.0 * a
        pts += [(b, a, a), (a, b, a), (a, a, b)]
        wts += [w, w, w]
    return QuadRule(np.array(pts), 0.5 * np.array(wts))


DEGREE5 = _degree5_rule()


def shape_eval(kind: str, lam) -> tuple[np.ndarray, np.ndarray]:
    """Scalar basis values and gradients w.r.t. barycentric coordinates.

    Returns ``(values, dvalues)`` with shapes ``(nloc,)`` and ``(nloc, 3)``;
    ``dvalues[i, k]`` is the derivative of basis ``i`` w.r.t. ``lam[k]``.
    The P1 kinds have ``nloc = 3``; MINI appends the bubble
    ``27 lam1 lam2 lam3``.
    """
    lam = np.asarray(lam, dtype=float)
    vals = list(lam)
    dvals = list(np.eye(3))
    if kind == MINI_VECTOR:
        l1, l2, l3 = lam
        vals.append(27.0 * l1 * l2 * l3)
        dvals.append(27.0 * np.array([l2 * l3, l1 * l3, l1 * l2]))
    elif kind not in KINDS:
        raise ValueError(f"unknown space kind {kind!r}")
    return np.array(vals), np.array(dvals)


class Space:
    """A finite element space on ``mesh``.

    Global numbering is component-major: component ``c`` of scalar dof
    ``d`` is ``c * n_scalar + d``. For MINI the scalar dofs are the mesh
    nodes followed by one bubble per triangle.
    """

    def __init__(self, kind: str, mesh: Mesh):
        if kind not in KINDS:
            raise ValueError(f"unknown space kind {kind!r}")
        self.kind = kind
        self.mesh = mesh
        self.ncomp = 1 if kind == P1_SCALAR else 2
        n, t = mesh.n_nodes, mesh.n_triangles
        if kind == MINI_VECTOR:
            self.n_scalar = n + t
            scal = np.column_stack([mesh.triangles, n + np.arange(t)])
        else:
            self.n_scalar = n
            scal = mesh.triangles
        self.nloc = scal.shape[1]
        self.scalar_dofs = scal
        self.dof_count = self.ncomp * self.n_scalar
        self.cell_dofs = np.concatenate(
            [scal + c * self.n_scalar for c in range(self.ncomp)], axis=1)

    def __repr__(self):
        return f"Space({self.kind}, dofs={self.dof_count})"

    @property
    def is_vector(self) -> bool:
        return self.ncomp == 2

    def nodal_dofs(self, nodes, comp: int = 0) -> np.ndarray:
        """Global dofs carrying nodal values of component ``comp``."""
        return np.asarray(nodes, dtype=np.int64) + comp * self.n_scalar


@dataclass
class FieldVec:
    space: Space
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.dof_count,):
            raise ValueError(
                f"coefficient length {self.coeffs.shape} does not match {self.space}")

    def copy(self) -> "FieldVec":
        return FieldVec(self.space, self.coeffs.copy())


class Geometry:
    """Affine element maps and quadrature points for a mesh."""

    def __init__(self, mesh: Mesh, rule: QuadRule = DEGREE5):
        self.mesh = mesh
        self.rule = rule
        p = mesh.nodes[mesh.triangles]  # (T,3,2)
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0):
            raise ValueError("mesh has non-positive triangle orientation")
        self.area = 0.5 * det
        # gradients of barycentric coordinates, (T,3,2)
        g = np.empty((len(det), 3, 2))
        g[:, 1, 0] = e2[:, 1] / det
        g[:, 1, 1] = -e2[:, 0] / det
        g[:, 2, 0] = -e1[:, 1] / det
        g[:, 2, 1] = e1[:, 0] / det
        g[:, 0] = -g[:, 1] - g[:, 2]
        self.dlam = g
        self.x = np.einsum("qk,tkd->tqd", rule.points, p)  # (T,Q,2)
        self.dx = 2.0 * self.area[:, None] * rule.weights[None, :]  # (T,Q)

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape


class Basis:
    """Basis values/gradients of a space at a set of per-triangle points.

    For scalar spaces ``val`` is ``(T,Q,nb)`` and ``grad`` ``(T,Q,nb,2)``.
    For vector spaces ``val`` is ``(T,Q,nb,2)`` and ``grad``
    ``(T,Q,nb,2,2)`` indexed ``[..., component, derivative]``.
    """

    def __init__(self, space: Space, dlam: np.ndarray, lam: np.ndarray):
        # lam: (T,Q,3) or (Q,3) broadcastable
        self.space = space
        T = dlam.shape[0]
        lam = np.broadcast_to(lam, (T,) + lam.shape[-2:]) if lam.ndim == 2 else lam
        nq = lam.shape[1]
        l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
        sval = [l1, l2, l3]
        sgrad = [np.broadcast_to(dlam[:, None, k, :], (T, nq, 2)) for k in range(3)]
        if space.kind == MINI_VECTOR:
            sval.append(27.0 * l1 * l2 * l3)
            sgrad.append(27.0 * ((l2 * l3)[..., None] * dlam[:, None, 0, :]
                                 + (l1 * l3)[..., None] * dlam[:, None, 1, :]
                                 + (l1 * l2)[..., None] * dlam[:, None, 2, :]))
        sval = np.stack(sval, axis=-1)  # (T,Q,nloc)
        sgrad = np.stack(sgrad, axis=-2)  # (T,Q,nloc,2)
        self.scalar_val = sval
        self.scalar_grad = sgrad
        nloc = sval.shape[-1]
        if not space.is_vector:
            self.val, self.grad = sval, sgrad
        else:
            val = np.zeros(sval.shape[:2] + (2 * nloc, 2))
            grad = np.zeros(sval.shape[:2] + (2 * nloc, 2, 2))
            for c in range(2):
                val[:, :, c * nloc:(c + 1) * nloc, c] = sval
                grad[:, :, c * nloc:(c + 1) * nloc, c, :] = sgrad
            self.val, self.grad = val, grad
        self.dofs = space.cell_dofs
        self._ref = None
        if lam.strides[0] == 0:  # same reference points on every triangle
            pts = lam[0]
            tab = [shape_eval(space.kind, l) for l in pts]
            # (Q, nloc) values and (T, nloc, Q*2) physical gradients
            self._ref = (np.array([t[0] for t in tab]),
                         np.ascontiguousarray(sgrad.transpose(0, 2, 1, 3)).reshape(len(sgrad), nloc, -1))

    @property
    def nb(self) -> int:
        return self.val.shape[2]

    @cached_property
    def div(self) -> np.ndarray:
        return self.grad[..., 0, 0] + self.grad[..., 1, 1]

    @cached_property
    def curl(self) -> np.ndarray:
        """Planar curl ``d v2/dx - d v1/dy``."""
        return self.grad[..., 1, 0] - self.grad[..., 0, 1]

    @cached_property
    def sym_grad(self) -> np.ndarray:
        return 0.5 * (self.grad + np.swapaxes(self.grad, -1, -2))

    def _eval_ref(self, c):
        rv, G = self._ref
        return c @ rv.T, np.einsum("tl,tlk->tk", c, G).reshape(len(c), -1, 2)

    def test_val(self, f: np.ndarray) -> np.ndarray:
        """``sum_q f[t,q] s_i(x_tq)`` for the scalar basis ``s_i``; ``(T, nloc)``."""
        if self._ref is not None:
            return f @ self._ref[0]
        return np.einsum("tqi,tq->ti", self.scalar_val, f)

    def test_grad(self, f: np.ndarray) -> np.ndarray:
        """``sum_q f[t,q,:] . grad s_i(x_tq)``; ``(T, nloc)``."""
        if self._ref is not None:
            return np.einsum("tk,tlk->tl", f.reshape(len(f), -1), self._ref[1])
        return np.einsum("tqid,tqd->ti", self.scalar_grad, f)

    def evaluate(self, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Field values and gradients for a coefficient vector."""
        c = coeffs[self.dofs]  # (T,nb)
        if self._ref is not None:
            if self.space.is_vector:
                nloc = self.space.nloc
                parts = [self._eval_ref(c[:, k * nloc:(k + 1) * nloc]) for k in range(2)]
                return (np.stack([p[0] for p in parts], -1), np.stack([p[1] for p in parts], -2))
            return self._eval_ref(c)
        if self.space.is_vector:
            nloc = self.space.nloc
            v = np.stack([np.einsum("tqb,tb->tq", self.scalar_val, c[:, k * nloc:(k + 1) * nloc])
                          for k in range(2)], axis=-1)
            g = np.stack([np.einsum("tqbd,tb->tqd", self.scalar_grad, c[:, k * nloc:(k + 1) * nloc])
                          for k in range(2)], axis=-2)
            return v, g
        v = np.einsum("tqb,tb->tq", self.scalar_val, c)
        g = np.einsum("tqbd,tb->tqd", self.scalar_grad, c)
        return v, g


class FEContext:
    """Geometry plus cached basis tables for every space kind on a mesh."""

    def __init__(self, mesh: Mesh, rule: QuadRule = DEGREE5):
        self.mesh = mesh
        self.geom = Geometry(mesh, rule)
        self.spaces = {k: Space(k, mesh) for k in KINDS}
        self._basis = {}

    def space(self, kind: str) -> Space:
        return self.spaces[kind]

    def basis(self, space: Space | str) -> Basis:
        kind = space if isinstance(space, str) else space.kind
        if kind not in self._basis:
            self._basis[kind] = Basis(self.spaces[kind], self.geom.dlam, self.geom.rule.points)
        return self._basis[kind]


_contexts: dict[int, FEContext] = {}


def context(mesh: Mesh) -> FEContext:
    """Shared per-mesh context (meshes are immutable)."""
    ctx = _contexts.get(id(mesh))
    if ctx is None or ctx.mesh is not mesh:
        ctx = FEContext(mesh)
        _contexts[id(mesh)] = ctx
    return ctx


def scatter_matrix(elem: np.ndarray, test_dofs: np.ndarray, trial_dofs: np.ndarray,
                   shape: tuple[int, int]) -> sp.csr_matrix:
    rows = np.broadcast_to(test_dofs[:, :, None], elem.shape)
    cols = np.broadcast_to(trial_dofs[:, None, :], elem.shape)
    return sla.compress(sla.Triplets(rows.ravel(), cols.ravel(), elem.ravel(), shape))


def scatter_vector(elem: np.ndarray, dofs: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(dofs.ravel(), weights=elem.ravel(), minlength=n)


Kernel = Callable[[Basis, Basis, Geometry], np.ndarray]


def assemble_weighted_operator(trial: Space, test: Space, mesh: Mesh, kernel: Kernel) -> sp.csr_matrix:
    """Assemble the bilinear form whose integrand is ``kernel(u, v, geom)``.

    The kernel receives trial and test :class:`Basis` tables and must return
    an array of shape ``(T, Q, n_test, n_trial)``.
    """
    if trial.mesh is not mesh or test.mesh is not mesh:
        raise ValueError("spaces and mesh do not match")
    ctx = context(mesh)
    u, v = ctx.basis(trial), ctx.basis(test)
    integrand = np.asarray(kernel(u, v, ctx.geom))
    expected = ctx.geom.shape + (v.nb, u.nb)
    if integrand.shape != expected:
        raise ValueError(f"kernel returned shape {integrand.shape}, expected {expected}")
    elem = np.einsum("tqij,tq->tij", integrand, ctx.geom.dx)
    return scatter_matrix(elem, v.dofs, u.dofs, (test.dof_count, trial.dof_count))


def mass_kernel(u: Basis, v: Basis, geom: Geometry) -> np.ndarray:
    if u.space.is_vector:
        return np.einsum("tqic,tqjc->tqij", v.val, u.val)
    return np.einsum("tqi,tqj->tqij", v.val, u.val)


def stiffness_kernel(u: Basis, v: Basis, geom: Geometry) -> np.ndarray:
    if u.space.is_vector:
        return np.einsum("tqicd,tqjcd->tqij", v.grad, u.grad)
    return np.einsum("tqid,tqjd->tqij", v.grad, u.grad)


def element_matrices(verts, kind: str = P1_SCALAR, rule: QuadRule = DEGREE5):
    """Scalar mass and stiffness matrices of one triangle with vertices ``verts``."""
    p = np.asarray(verts, dtype=float)
    e1, e2 = p[1] - p[0], p[2] - p[0]
    det = e1[0] * e2[1] - e1[1] * e2[0]
    if det == 0:
        raise ValueError("degenerate triangle")
    g = np.array([[e2[1], -e2[0]], [-e1[1], e1[0]]]) / det
    dlam = np.vstack([-g.sum(0), g])  # (3,2)
    n = 4 if kind == MINI_VECTOR else 3
    M, K = np.zeros((n, n)), np.zeros((n, n))
    for lam, w in zip(rule.points, rule.weights):
        v, dv = shape_eval(kind, lam)
        gr = dv @ dlam
        M += w * abs(det) * np.outer(v, v)
        K += w * abs(det) * gr @ gr.T
    return M, K


def assemble_mass(space: Space, mesh: Mesh) -> sp.csr_matrix:
    return assemble_weighted_operator(space, space, mesh, mass_kernel)


def assemble_stiffness(space: Space, mesh: Mesh) -> sp.csr_matrix:
    return assemble_weighted_operator(space, space, mesh, stiffness_kernel)


def load_vector(space: Space, mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """``b_i = integral f phi_i`` for ``f`` given at quadrature points."""
    ctx = context(mesh)
    v = ctx.basis(space)
    if space.is_vector:
        elem = np.einsum("tqic,tqc,tq->ti", v.val, values, ctx.geom.dx)
    else:
        elem = np.einsum("tqi,tq,tq->ti", v.val, values, ctx.geom.dx)
    return scatter_vector(elem, v.dofs, space.dof_count)


def l2_project(space: Space, mesh: Mesh, f: Callable[[np.ndarray], np.ndarray]) -> FieldVec:
    """L2-orthogonal projection of ``f(x)`` (``x`` shaped ``(..., 2)``)."""
    ctx = context(mesh)
    vals = np.asarray(f(ctx.geom.x), dtype=float)
    expected = ctx.geom.shape + ((2,) if space.is_vector else ())
    vals = np.broadcast_to(vals, expected)
    b = load_vector(space, mesh, vals)
    M = assemble_mass(space, mesh)
    return FieldVec(space, sla.solve_direct(M, b))


def eval_field(field: FieldVec, points, gradient: bool = False):
    """Evaluate a field at arbitrary points inside the mesh."""
    space = field.space
    mesh = space.mesh
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri, lam = mesh.locate(pts)
    geom = context(mesh).geom
    basis = Basis(space, geom.dlam[tri], lam[:, None, :])
    c = field.coeffs[space.cell_dofs[tri]]
    nloc = space.nloc
    if space.is_vector:
        val = np.stack([np.einsum("tqb,tb->t", basis.scalar_val, c[:, k * nloc:(k + 1) * nloc])
                        for k in range(2)], axis=-1)
        grad = np.stack([np.einsum("tqbd,tb->td", basis.scalar_grad, c[:, k * nloc:(k + 1) * nloc])
                         for k in range(2)], axis=-2)
    else:
        val = np.einsum("tqb,tb->t", basis.scalar_val, c)
        grad = np.einsum("tqbd,tb->td", basis.scalar_grad, c)
    return (val, grad) if gradient else val


def eval_at_quadrature(field: FieldVec) -> tuple[np.ndarray, np.ndarray]:
    """Field values and gradients at every quadrature point of its mesh."""
    return context(field.space.mesh).basis(field.space).evaluate(field.coeffs)


def integrate(mesh: Mesh, values: np.ndarray) -> float:
    """Quadrature integral of values given at quadrature points."""
    return float(np.einsum("tq,tq->", values, context(mesh).geom.dx))
