"""Curvature and connection checks against closed-form model geometries.

Frozen expected values:
  * bi-invariant metric on su(2) with bracket scale lam: Ric = (lam^2/2) Id
  * torsion H = kappa * (frame Levi-Civita symbol) at kappa = lam makes the
    skew-torsion Ricci vanish identically
  * flat T^3 with H = c dx^dy^dz: H^2 = 2 c^2 Id, |H|^2 = 6 c^2,
    skew-torsion Ricci = -(c^2/2) Id
  * conformal metric exp(2 phi) delta on T^2: Ric = -(flat Laplacian phi) delta
"""

import numpy as np
import pytest

from grflow.backends import HomogeneousModel, NonSPDError, PeriodicGrid, levi_civita_symbol
from grflow.fields import (
    FourierScalar,
    LinearCombo,
    conformal_metric,
    constant_three_form,
    two_form_mode,
)
from grflow.geometry import (
    GeometrySlice,
    antisymmetrize3,
    bismut_connection,
    bismut_ricci,
    codifferential_H,
    cov_deriv_form,
    dstack,
    exterior_derivative,
    form_norm2,
    grf_rhs_fast,
    grf_rhs_slice,
    h_squared,
    levi_civita,
    ricci_lc,
    scalar_curv,
    second_partials,
)

LAM = 2.0


@pytest.fixture(scope="module")
def su2():
    return HomogeneousModel.su2(LAM)


@pytest.fixture(scope="module")
def torus3():
    return PeriodicGrid((8, 8, 8), (1.0, 1.0, 1.0))


def _wavy_slice(grid):
    """A deliberately non-symmetric smooth (g, b, H0) for regression checks."""
    L = tuple(grid.lengths)
    phi = LinearCombo([
        (1.0, FourierScalar(L, (1, 0, 0), amp=0.05)),
        (1.0, FourierScalar(L, (0, 1, 1), amp=0.04, phase=0.3)),
    ])
    g = conformal_metric(grid, phi)
    w = FourierScalar(L, (1, 1, 0), amp=0.03).sample(grid)
    g[..., 0, 1] += w
    g[..., 1, 0] += w
    b = two_form_mode(grid, 0, 1, FourierScalar(L, (0, 0, 1), amp=0.2)) + two_form_mode(
        grid, 1, 2, FourierScalar(L, (1, 0, 0), amp=0.15, phase=1.1)
    )
    return GeometrySlice(grid, g, b, constant_three_form(grid, 0.8))


# -- flat / bi-invariant oracles ----------------------------------------------


def test_flat_torus_curvature_vanishes(torus3):
    g = torus3.constant_field(np.eye(3))
    gam = levi_civita(torus3, g)
    assert np.max(np.abs(gam)) == 0.0
    assert np.max(np.abs(ricci_lc(torus3, g))) == 0.0
    assert np.max(np.abs(scalar_curv(torus3, g))) == 0.0


def test_su2_ricci(su2):
    g = np.eye(3)
    ric = ricci_lc(su2, g)
    assert np.max(np.abs(ric - 0.5 * LAM**2 * np.eye(3))) < 1e-12
    assert scalar_curv(su2, g) == pytest.approx(1.5 * LAM**2, abs=1e-12)


def test_su2_bismut_flat(su2):
    g = np.eye(3)
    H = LAM * levi_civita_symbol(3)
    bis = bismut_ricci(su2, g, H)
    assert np.max(np.abs(bis.total)) < 1e-12
    # symmetric part Ric - H^2/4 and antisymmetric part cancel separately
    assert np.max(np.abs(bis.sym)) < 1e-12
    assert np.max(np.abs(bis.alt)) < 1e-12


def test_su2_h_squared(su2):
    kappa = 0.7
    H = kappa * levi_civita_symbol(3)
    out = h_squared(np.eye(3), H)
    assert np.max(np.abs(out - 2.0 * kappa**2 * np.eye(3))) < 1e-12


def test_flat_torus_constant_h(torus3):
    c = 1.7
    H = constant_three_form(torus3, c)
    g = torus3.constant_field(np.eye(3))
    out = h_squared(g, H)
    assert np.max(np.abs(out - 2.0 * c**2 * np.eye(3))) < 1e-12
    slc = GeometrySlice(torus3, g, h0=H)
    assert np.max(np.abs(slc.h_norm2 - 6.0 * c**2)) < 1e-12
    assert np.max(np.abs(codifferential_H(torus3, g, H))) < 1e-13
    bis = bismut_ricci(torus3, g, H)
    assert np.max(np.abs(bis.total + 0.5 * c**2 * np.eye(3))) < 1e-12


def test_h_squared_rejects_singular_metric(torus3):
    H = constant_three_form(torus3, 1.0)
    g = torus3.constant_field(np.diag([1.0, 0.0, 1.0]))
    with pytest.raises(NonSPDError):
        h_squared(g, H)


def test_h_squared_is_psd_gram(torus3):
    slc = _wavy_slice(torus3)
    w = np.linalg.eigvalsh(slc.h2)
    assert float(np.min(w)) >= -1e-12


def test_bismut_connection_pattern(torus3):
    c = 0.9
    H = constant_three_form(torus3, c)
    g = torus3.constant_field(np.eye(3))
    gam = bismut_connection(torus3, g, H)
    # torsion part (c/2) eps^k_{ij}
    assert gam[0, 0, 0, 2, 0, 1] == pytest.approx(c / 2)
    assert gam[0, 0, 0, 2, 1, 0] == pytest.approx(-c / 2)
    assert np.max(np.abs(gam - 0.5 * c * levi_civita_symbol(3))) < 1e-13


def test_bismut_metric_compatibility(su2, torus3):
    # invariant model: exact; grid: truncation-order small
    g = np.diag([1.0, 1.3, 0.8])
    H = 0.45 * levi_civita_symbol(3)
    gam = bismut_connection(su2, g, H)
    Dg = cov_deriv_form(su2, gam, g, 2)
    assert np.max(np.abs(Dg)) < 1e-12

    slc = _wavy_slice(torus3)
    Dg = cov_deriv_form(torus3, slc.gamma_bismut, slc.g, 2)
    assert np.max(np.abs(Dg)) < 2e-2    # 8^3 lattice, 4th-order stencils


def test_antisymmetric_part_matches_codifferential(torus3):
    slc = _wavy_slice(torus3)
    ref = -0.5 * codifferential_H(torus3, slc.g, slc.H, gamma=slc.gamma_lc, ginv=slc.ginv)
    assert np.max(np.abs(slc.bismut.alt - ref)) < 1e-14
    assert np.max(np.abs(slc.bismut.total - slc.bismut.sym - slc.bismut.alt)) < 1e-14


# -- conformal metric on T^2 --------------------------------------------------


def test_conformal_ricci_matches_analytic():
    errs = []
    for N in (32, 64):
        grid = PeriodicGrid((N, N), (1.0, 1.0))
        phi_fn = FourierScalar((1.0, 1.0), (1, 2), amp=0.05)
        phi = phi_fn.sample(grid)
        g = conformal_metric(grid, phi)
        flat = GeometrySlice(grid, grid.constant_field(np.eye(2)))
        target = -flat.laplacian_fn(phi)[..., None, None] * np.eye(2)
        errs.append(np.max(np.abs(ricci_lc(grid, g) - target)))
    assert errs[1] < 2e-3
    assert 10.0 <= errs[0] / errs[1] <= 22.0    # 4th-order convergence


def test_scalar_curvature_conformal():
    grid = PeriodicGrid((64, 64), (1.0, 1.0))
    phi_fn = FourierScalar((1.0, 1.0), (1, 0), amp=0.05)
    phi = phi_fn.sample(grid)
    g = conformal_metric(grid, phi)
    flat = GeometrySlice(grid, grid.constant_field(np.eye(2)))
    # R = -2 exp(-2 phi) (flat Laplacian phi) in two dimensions
    target = -2.0 * np.exp(-2.0 * phi) * flat.laplacian_fn(phi)
    assert np.max(np.abs(scalar_curv(grid, g) - target)) < 2e-3


# -- exterior derivative and codifferential -----------------------------------


def test_total_three_form_trivial_cases(torus3, su2):
    c = 1.2
    slc = GeometrySlice(torus3, torus3.constant_field(np.eye(3)), h0=constant_three_form(torus3, c))
    assert np.max(np.abs(slc.H - constant_three_form(torus3, c))) == 0.0
    kappa = 0.8
    slc2 = GeometrySlice(su2, np.eye(3), h0=kappa * levi_civita_symbol(3))
    assert np.max(np.abs(slc2.H - kappa * levi_civita_symbol(3))) < 1e-15


def test_db_is_exactly_closed():
    # discrete partials along different axes commute, so d(db) = 0 exactly
    grid = PeriodicGrid((16, 16, 16), (1.0, 1.0, 1.0))
    b = two_form_mode(grid, 0, 1, FourierScalar((1.0,) * 3, (1, 1, 1), amp=1.0))
    H = exterior_derivative(grid, b, 2)
    dH = exterior_derivative(grid, H, 3)
    assert np.max(np.abs(dH)) < 1e-12


def test_exterior_derivative_antisymmetry(torus3):
    slc = _wavy_slice(torus3)
    H = slc.H
    assert np.max(np.abs(H - antisymmetrize3(H))) < 1e-13


def test_homogeneous_invariant_two_forms_are_closed(su2):
    # any invariant 2-form on su(2) pairs a bracket with its own index
    rng = np.random.default_rng(5)
    beta = rng.normal(size=(3, 3))
    beta = 0.5 * (beta - beta.T)
    dbeta = exterior_derivative(su2, beta, 2)
    assert np.max(np.abs(dbeta)) < 1e-14


def test_codifferential_single_mode_spectral_oracle():
    errs = []
    for N in (16, 32):
        grid = PeriodicGrid((N, N, N), (1.0, 1.0, 1.0))
        k = 2.0 * np.pi
        b = two_form_mode(grid, 0, 1, FourierScalar((1.0,) * 3, (0, 0, 1), amp=1.0))
        H = exterior_derivative(grid, b, 2)
        g = grid.constant_field(np.eye(3))
        out = codifferential_H(grid, g, H)
        # b = sin(k z) dx^dy gives H = k cos(k z) dz^dx^dy and
        # (d*H)_{01} = -d^2/dz^2 sin(k z) = k^2 sin(k z)
        z = grid.coords()[2]
        expected = np.zeros_like(out)
        expected[..., 0, 1] = k * k * np.sin(k * z)
        expected[..., 1, 0] = -expected[..., 0, 1]
        errs.append(np.max(np.abs(out - expected)))
    assert errs[1] < 5e-3
    assert 10.0 <= errs[0] / errs[1] <= 22.0


def test_su2_invariant_codifferential_vanishes(su2):
    H = 1.3 * levi_civita_symbol(3)
    g = np.diag([1.0, 1.0, 1.0])
    assert np.max(np.abs(codifferential_H(su2, g, H))) < 1e-13


# -- scalar calculus -----------------------------------------------------------


def test_laplacian_fourier_mode():
    grid = PeriodicGrid((32,), (2.0,))
    slc = GeometrySlice(grid, grid.constant_field(np.eye(1)))
    x = grid.axis_coords(0)
    k = 2.0 * np.pi / 2.0
    u = np.cos(k * x)
    lap = slc.laplacian_fn(u)
    assert np.max(np.abs(lap + k * k * u)) < 2e-4


def test_laplacian_ignores_torsion(torus3):
    slc = _wavy_slice(torus3)
    flat_h = GeometrySlice(torus3, slc.g, slc.b, h0=None)
    u = FourierScalar((1.0,) * 3, (1, 0, 1), amp=1.0).sample(torus3)
    assert np.max(np.abs(slc.laplacian_fn(u) - flat_h.laplacian_fn(u))) < 1e-13


def test_vector_laplacian_constant_field(torus3):
    c = 1.1
    H = constant_three_form(torus3, c)
    g = torus3.constant_field(np.eye(3))
    slc = GeometrySlice(torus3, g, h0=H)
    Y = torus3.constant_field(np.array([1.0, -0.4, 0.2]))
    out = slc.laplacian_vec(Y)
    expected = -0.25 * np.einsum("...ij,...j->...i", slc.h2, Y)
    assert np.max(np.abs(out - expected)) < 1e-12


def test_gradient_and_hessian_against_closed_form():
    grid = PeriodicGrid((32, 32, 8), (1.0, 1.0, 1.0))
    slc = GeometrySlice(grid, grid.constant_field(np.eye(3)))
    fn = FourierScalar((1.0,) * 3, (1, 1, 0), amp=0.8, phase=0.2)
    u = fn.sample(grid)
    pts = np.stack([c.ravel() for c in grid.coords()], axis=-1)
    grad = slc.grad(u).reshape(-1, 3)
    assert np.max(np.abs(grad - fn.grad(pts))) < 5e-4
    hess = slc.hessian_lc(u).reshape(-1, 3, 3)
    assert np.max(np.abs(hess - fn.hess(pts))) < 5e-3
    gn2 = slc.grad_norm2(u).reshape(-1)
    assert np.max(np.abs(gn2 - np.sum(fn.grad(pts) ** 2, axis=-1))) < 5e-3


def test_second_partials_symmetry(torus3):
    u = FourierScalar((1.0,) * 3, (1, 2, 0), amp=1.0).sample(torus3)
    P = second_partials(torus3, u)
    assert np.max(np.abs(P - np.swapaxes(P, -1, -2))) < 1e-12


def test_form_norm2_known_values(torus3):
    slc = _wavy_slice(torus3)
    # |alpha|^2 for a 1-form equals g^{ij} a_i a_j
    rng = np.random.default_rng(2)
    alpha = rng.normal(size=slc.g.shape[:-1])
    ref = np.einsum("...ij,...i,...j->...", slc.ginv, alpha, alpha)
    assert np.max(np.abs(form_norm2(alpha, slc.ginv, 1) - ref)) < 1e-12
    # 3-form norm reduces to the frozen 6 c^2 on the flat model
    flat = GeometrySlice(torus3, torus3.constant_field(np.eye(3)), h0=constant_three_form(torus3, 2.0))
    assert np.max(np.abs(form_norm2(flat.H, flat.ginv, 3) - 24.0)) < 1e-12


# -- fused flow right-hand side ------------------------------------------------


def test_fused_rhs_matches_slice_path(torus3):
    slc = _wavy_slice(torus3)
    dg1, db1 = grf_rhs_slice(slc)
    dg2, db2 = grf_rhs_fast(torus3, slc.g, slc.b, slc.h0)
    assert np.max(np.abs(dg1 - dg2)) < 1e-12
    assert np.max(np.abs(db1 - db2)) < 1e-12


def test_fused_rhs_matches_slice_path_homogeneous(su2):
    g = np.diag([1.0, 1.2, 0.9])
    H = 1.4 * levi_civita_symbol(3)
    slc = GeometrySlice(su2, g, h0=H)
    a1 = grf_rhs_slice(slc)
    a2 = grf_rhs_fast(su2, g, slc.b, slc.h0)
    assert np.max(np.abs(a1[0] - a2[0])) == 0.0
    assert np.max(np.abs(a1[1] - a2[1])) == 0.0


def test_slice_volume(torus3):
    g = torus3.constant_field(4.0 * np.eye(3))
    slc = GeometrySlice(torus3, g)
    assert slc.volume() == pytest.approx(8.0)   # sqrt(det 4I) = 8 on unit torus
