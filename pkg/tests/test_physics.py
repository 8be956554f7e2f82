import numpy as np
import pytest
from hypothesis import given, strategies as st

from chmhd.physics import (
    ExactSolution, PhysParams, bubble_profile, convex_split_f, coeff_eval, cut_off,
    double_well_F, double_well_f, initial_conditions, manufactured_forcing, spinodal_noise,
)
from chmhd.mesh import UNIT_SQUARE, build_mesh

KINDS = ("density", "viscosity", "conductivity", "mobility")
finite = st.floats(-10, 10, allow_nan=False)


def test_params_positive():
    for key in ("rho1", "eta2", "sigma1", "m2", "mu", "gamma", "epsilon"):
        with pytest.raises(ValueError):
            PhysParams(**{key: 0.0})
    with pytest.raises(ValueError):
        PhysParams(epsilon=-0.01)
    with pytest.raises(ValueError):
        PhysParams(gravity=(0.0, 1.0, 2.0))
    assert PhysParams(lam=-1.0).lam == -1.0


def test_coefficient_examples():
    assert coeff_eval("density", PhysParams(), 0.37) == 1.0
    P = PhysParams(rho1=1.0, rho2=1000.0)
    assert coeff_eval("density", P, 1.0) == 1000.0
    assert coeff_eval("density", P, 0.0) == 500.5


@pytest.mark.parametrize("kind", KINDS)
def test_coefficient_endpoints_use_own_pair(kind):
    P = PhysParams(rho1=2, rho2=30, eta1=0.5, eta2=7, sigma1=1000, sigma2=3, m1=1e-4, m2=2e-4)
    a, b = P.pair(kind)
    assert coeff_eval(kind, P, -1.0) == a
    assert coeff_eval(kind, P, 1.0) == b


@given(finite)
def test_cutoff_coefficients_in_bounds(phi):
    P = PhysParams(rho1=1, rho2=1e-3, eta1=3, eta2=0.1, sigma1=1, sigma2=1000, m1=1, m2=1e-3)
    for kind in KINDS:
        lo, hi = sorted(P.pair(kind))
        v = coeff_eval(kind, P, cut_off(phi))
        assert lo * (1 - 1e-15) <= v <= hi * (1 + 1e-15)


def test_cutoff_examples():
    assert cut_off(1.5) == 1.0
    assert cut_off(-0.3) == -0.3
    assert cut_off(-2.0) == -1.0


@given(finite, finite)
def test_cutoff_idempotent_lipschitz(a, b):
    assert cut_off(cut_off(a)) == cut_off(a)
    assert abs(cut_off(a) - cut_off(b)) <= abs(a - b)
    assert -1.0 <= cut_off(a) <= 1.0


def test_double_well_examples():
    assert double_well_F(1.0) == 0.0 and double_well_F(-1.0) == 0.0
    assert double_well_F(0.0) == 0.25
    assert double_well_F(2.0) == 2.25
    assert convex_split_f(1.0, 1.0) == 0.0
    assert convex_split_f(0.5, -1.0) == 1.125


def test_f_is_derivative_of_F():
    phi = np.linspace(-2, 2, 401)
    d = 1e-4
    fd = (double_well_F(phi + d) - double_well_F(phi - d)) / (2 * d)
    assert np.abs(double_well_f(phi) - fd).max() <= 10 * d ** 2


def test_convex_splitting_identity(rng):
    A = rng.uniform(-2, 2, 1000)
    D = rng.uniform(-2, 2, 1000)
    lhs = (A ** 3 - D) * (A - D)
    rhs = (0.25 * ((A ** 2 - 1) ** 2 - (D ** 2 - 1) ** 2) + 0.25 * (A ** 2 - D ** 2) ** 2
           + 0.5 * A ** 2 * (A - D) ** 2 + 0.5 * (A - D) ** 2)
    assert np.abs(lhs - rhs).max() < 1e-12


# --- exact solution ---------------------------------------------------------------

EX = ExactSolution(PhysParams())
H = 1e-5


def _pts(rng, n=10):
    return rng.uniform(0.05, 0.95, (n, 2))


def fd_grad(f, x, t, h=H):
    """Central-difference gradient; last axis of the result is the derivative."""
    cols = []
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        cols.append((f(x + e, t) - f(x - e, t)) / (2 * h))
    return np.stack(cols, -1)


def fd_dt(f, x, t, h=H):
    return (f(x, t + h) - f(x, t - h)) / (2 * h)


def test_exact_examples():
    assert np.allclose(EX.u(np.array([0.0, 0.5]), 0.3), 0.0, atol=1e-15)
    assert EX.phi(np.array([0.0, 0.0]), 0.0) == 1.0


def test_exact_boundary_properties(rng):
    s = rng.uniform(0, 1, 20)
    for side in (np.column_stack([0 * s, s]), np.column_stack([1 + 0 * s, s]),
                 np.column_stack([s, 0 * s]), np.column_stack([s, 1 + 0 * s])):
        assert np.abs(EX.u(side, 0.7)).max() < 1e-14
    g = EX.phi_grad(np.column_stack([0 * s, s]), 0.4)
    assert np.abs(g[:, 0]).max() < 1e-14
    g = EX.phi_grad(np.column_stack([s, 1 + 0 * s]), 0.4)
    assert np.abs(g[:, 1]).max() < 1e-14


def test_exact_pressure_mean_zero():
    from scipy.integrate import dblquad
    v, _ = dblquad(lambda y, x: EX.p(np.array([x, y]), 0.3), 0, 1, 0, 1)
    assert abs(v) < 1e-12


def test_exact_divergence_free(rng):
    x = _pts(rng)
    for f in (EX.u, EX.B):
        J = fd_grad(f, x, 0.3)
        assert np.abs(J[:, 0, 0] + J[:, 1, 1]).max() < 1e-9
        A = f(x, 0.3)
        Jc = EX.u_grad(x, 0.3) if f is EX.u else EX.B_grad(x, 0.3)
        assert np.abs(Jc[:, 0, 0] + Jc[:, 1, 1]).max() < 1e-12
        assert A.shape == (len(x), 2)


@pytest.mark.parametrize("name,grad", [
    ("phi", "phi_grad"), ("omega", "omega_grad"), ("u", "u_grad"), ("B", "B_grad"), ("p", "p_grad")])
def test_exact_gradients_against_differences(rng, name, grad):
    ex = ExactSolution(PhysParams(gamma=0.7, epsilon=0.3))
    x = _pts(rng)
    fd = fd_grad(getattr(ex, name), x, 0.2)
    an = getattr(ex, grad)(x, 0.2)
    assert np.abs(fd - an).max() < 1e-6 * max(1.0, np.abs(an).max())


@pytest.mark.parametrize("name,hess", [("u_grad", "u_hess"), ("B_grad", "B_hess"),
                                       ("phi_grad", None), ("omega_grad", None)])
def test_exact_second_derivatives(rng, name, hess):
    ex = ExactSolution(PhysParams(gamma=0.7, epsilon=0.3))
    x = _pts(rng)
    fd = fd_grad(getattr(ex, name), x, 0.2)
    if hess is not None:
        an = getattr(ex, hess)(x, 0.2)
    elif name == "phi_grad":
        an = ex.phi_lap(x, 0.2)
        fd = fd[..., 0, 0] + fd[..., 1, 1]
    else:
        an = ex.omega_lap(x, 0.2)
        fd = fd[..., 0, 0] + fd[..., 1, 1]
    assert np.abs(fd - an).max() < 1e-5 * max(1.0, np.abs(an).max())


def test_exact_time_derivatives(rng):
    x = _pts(rng)
    for f, ft in ((EX.phi, EX.phi_t), (EX.u, EX.u_t), (EX.B, EX.B_t)):
        assert np.abs(fd_dt(f, x, 0.4) - ft(x, 0.4)).max() < 1e-8


def test_omega_is_chemical_potential(rng):
    P = PhysParams(gamma=0.3, epsilon=0.2)
    ex = ExactSolution(P)
    x = _pts(rng)
    lap = fd_grad(ex.phi_grad, x, 0.1)
    lap = lap[..., 0, 0] + lap[..., 1, 1]
    ph = ex.phi(x, 0.1)
    expect = -P.gamma * P.epsilon * lap + P.gamma / P.epsilon * (ph ** 3 - ph)
    assert np.abs(ex.omega(x, 0.1) - expect).max() < 1e-6


# --- forcing --------------------------------------------------------------------------

def strong_residuals(P, x, t):
    """Strong-form residuals of the model at the reference solution, by differences."""
    ex = ExactSolution(P)
    rho = lambda y, s: coeff_eval("density", P, ex.phi(y, s))
    eta = lambda y, s: coeff_eval("viscosity", P, ex.phi(y, s))
    sig = lambda y, s: coeff_eval("conductivity", P, ex.phi(y, s))
    mob = lambda y, s: coeff_eval("mobility", P, ex.phi(y, s))
    drho = 0.5 * (P.rho2 - P.rho1)

    flux = lambda y, s: ex.phi(y, s)[..., None] * ex.u(y, s) - mob(y, s)[..., None] * ex.omega_grad(y, s)
    div = lambda F, y, s: np.trace(fd_grad(F, y, s), axis1=-2, axis2=-1)
    f_phi = fd_dt(ex.phi, x, t) + div(flux, x, t)

    m = lambda y, s: rho(y, s)[..., None] * ex.u(y, s) - drho * mob(y, s)[..., None] * ex.omega_grad(y, s)
    u = ex.u(x, t)
    gu = fd_grad(ex.u, x, t)
    stress = lambda y, s: eta(y, s)[..., None, None] * (fd_grad(ex.u, y, s, 1e-4)
                                                       + np.swapaxes(fd_grad(ex.u, y, s, 1e-4), -1, -2))
    div_stress = np.stack([div(lambda y, s: stress(y, s)[..., c, :], x, t) for c in range(2)], -1)
    B = ex.B(x, t)
    gB = fd_grad(ex.B, x, t)
    j = gB[..., 1, 0] - gB[..., 0, 1]
    lorentz = -np.stack([-j * B[..., 1], j * B[..., 0]], -1) / P.mu  # -(curl B x B)/mu
    f_u = (rho(x, t)[..., None] * fd_dt(ex.u, x, t)
           + 0.5 * (fd_dt(rho, x, t) + div(m, x, t))[..., None] * u
           + np.einsum("...cd,...d->...c", gu, m(x, t))
           - div_stress + ex.p_grad(x, t) + lorentz
           + P.lam * ex.phi(x, t)[..., None] * ex.omega_grad(x, t)
           - rho(x, t)[..., None] * np.asarray(P.gravity))

    def curl_s(y, s):  # (1/sigma) curl B
        g = fd_grad(ex.B, y, s, 1e-4)
        return (g[..., 1, 0] - g[..., 0, 1]) / sig(y, s)

    def cross(y, s):  # u x B
        a, b = ex.u(y, s), ex.B(y, s)
        return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]

    rot = lambda F, y, s: (lambda g: np.stack([g[..., 1], -g[..., 0]], -1))(fd_grad(F, y, s))
    f_B = fd_dt(ex.B, x, t) + rot(curl_s, x, t) / P.mu - rot(cross, x, t)
    return f_u, f_B, f_phi


@pytest.mark.parametrize("P", [
    PhysParams(),
    PhysParams(rho1=1.0, rho2=1e-3),
    PhysParams(rho1=2.0, rho2=0.5, eta1=1.5, eta2=0.7, sigma1=2.0, sigma2=0.5, m1=0.3, m2=0.9,
               mu=1.7, gamma=0.6, epsilon=0.8, lam=2.0, gravity=(0.3, -1.0)),
])
def test_forcing_matches_strong_form(rng, P):
    x = _pts(rng, 6)
    t = 0.35
    f_u, f_B, f_phi, f_om = manufactured_forcing(t, t - 0.01, 0.01, P, x)
    g_u, g_B, g_phi = strong_residuals(P, x, t)
    scale = lambda a: max(1.0, np.abs(a).max())
    assert np.abs(f_phi - g_phi).max() < 1e-6 * scale(f_phi)
    assert np.abs(f_u - g_u).max() < 1e-5 * scale(f_u)
    assert np.abs(f_B - g_B).max() < 1e-5 * scale(f_B)
    assert np.all(f_om == 0.0)


def test_forcing_time_factorization(rng):
    """At times with equal cos t the forcing differs only through the sin t terms."""
    P = PhysParams()
    x = _pts(rng, 5)
    t = 0.6
    a = manufactured_forcing(t, t, 0.1, P, x)
    b = manufactured_forcing(-t, -t, 0.1, P, x)
    # phi_t, u_t and B_t flip sign; the rest is identical
    ex = ExactSolution(P)
    assert np.allclose(a[2] - b[2], 2 * ex.phi_t(x, t), atol=1e-10)
    assert np.allclose(a[1] - b[1], 2 * ex.B_t(x, t), atol=1e-10)


def test_noise_is_mean_free(rng):
    for seed in range(5):
        r = spinodal_noise(300, seed)
        assert abs(r.mean()) < 1e-15
        assert np.abs(r).max() <= 1.0


def test_spinodal_initial_bounds():
    m = build_mesh(UNIT_SQUARE, 8, 8)
    d = initial_conditions("spinodal", PhysParams(), seed=3, mesh=m)
    N = m.n_nodes
    assert np.all(np.abs(d.nodal_phi + 0.05) <= 0.001 * (1 + 1 / N))
    assert abs(d.extra["noise"].mean()) < 1e-15
    with pytest.raises(ValueError):
        initial_conditions("spinodal", PhysParams())


def test_bubble_profile():
    c, R, e = (0.5, 0.3), 0.2, 0.01
    assert bubble_profile(np.array([0.7, 0.3]), c, R, e) == pytest.approx(0.0, abs=1e-14)
    assert bubble_profile(np.array([0.5, 1.2]), c, R, e) == pytest.approx(-1.0, abs=1e-6)
    assert bubble_profile(np.array([0.5, 0.3]), c, R, e) == pytest.approx(1.0, abs=1e-6)


def test_unknown_initial_kind():
    with pytest.raises(ValueError):
        initial_conditions("vortex", PhysParams())
