"""Heat / conjugate-heat solver and identity checks.

Background families used here:
  * static flat circle or torus (closed-form kernels and mode decay)
  * evolving torus with constant 3-form torsion, g(t) = (1+3c^2 t)^{1/3} Id,
    where the mode heat solution is exp(-k^2 F(t)) cos(k x) with
    F(t) = ((1+3c^2 t)^{2/3} - 1) / (2 c^2)
  * 2D conformal Ricci flow (H = 0) for the intertwining relations
"""

import math
from functools import lru_cache

import numpy as np
import pytest

from grflow.backends import PeriodicGrid
from grflow.fields import FourierScalar, conformal_metric, constant_three_form
from grflow.flow import run_flow, static_flow
from grflow.geometry import GeometrySlice
from grflow.heat import (
    HeatError,
    SpacetimeFunction,
    bochner_residual_1,
    bochner_residual_2,
    bochner_residual_3,
    conj_flow,
    conj_heat_op,
    duality_residual,
    heat_flow,
    heat_kernel,
    heat_op,
    intertwine_check_1,
    intertwine_check_2,
    kernel_matrix,
    logsob_check,
    poincare_check,
)


# the refinement helpers run dt slightly past the conservative stability
# heuristic; the convergence assertions below confirm nothing blows up
pytestmark = pytest.mark.filterwarnings("ignore:dt =")


@pytest.fixture(scope="module")
def circle():
    grid = PeriodicGrid((64,), (2.0 * np.pi,))
    slc = GeometrySlice(grid, grid.constant_field(np.eye(1)))
    return static_flow(slc, 0.0, 1.0, nodes=11)


@pytest.fixture(scope="module")
def torus_grf():
    """Genuine flow solution with torsion, c = 1, up to t = 0.1."""
    grid = PeriodicGrid((8,) * 3, (1.0,) * 3)
    ic = GeometrySlice(grid, grid.constant_field(np.eye(3)), h0=constant_three_form(grid, 1.0))
    return run_flow(ic, t_final=0.1, dt=1e-3, store_every=10)


@lru_cache(maxsize=None)
def torus_grf_stored(N, dt, T=0.05):
    grid = PeriodicGrid((N,) * 3, (1.0,) * 3)
    ic = GeometrySlice(grid, grid.constant_field(np.eye(3)), h0=constant_three_form(grid, 1.0))
    return run_flow(ic, t_final=T, dt=dt, store_every=1)


@lru_cache(maxsize=None)
def ricci2d(N, dt, T=0.05):
    grid = PeriodicGrid((N, N), (1.0, 1.0))
    phi = FourierScalar((1.0, 1.0), (1, 0), amp=0.05).sample(grid)
    ic = GeometrySlice(grid, conformal_metric(grid, phi))
    return run_flow(ic, t_final=T, dt=dt, store_every=1)


def mode_solution(sol, c=1.0, shift=0.0):
    """Analytic heat solution on the constant-torsion torus flow."""
    grid = sol.backend
    k = 2.0 * np.pi
    X = grid.coords()[0]

    def fn(t):
        F = ((1.0 + 3.0 * c * c * t) ** (2.0 / 3.0) - 1.0) / (2.0 * c * c)
        return np.exp(-k * k * F) * np.cos(k * X) + shift

    return SpacetimeFunction.from_callable(sol, fn)


# -- operators -----------------------------------------------------------------


def test_heat_op_constant_is_zero(circle):
    u = SpacetimeFunction.from_callable(circle, lambda t: np.full((64,), 3.0))
    assert np.max(np.abs(heat_op(u).values)) < 1e-13


def test_heat_op_circle_mode(circle):
    x = circle.backend.axis_coords(0)
    u = SpacetimeFunction.from_callable(circle, lambda t: np.exp(-t) * np.cos(x))
    res = heat_op(u).values
    # truncation error only: O(h^4) spatial + O(dt^2) nodal time derivative
    assert np.max(np.abs(res)) < 5e-3


def test_conj_heat_op_constant_with_torsion():
    c = 1.3
    grid = PeriodicGrid((8,) * 3, (1.0,) * 3)
    slc = GeometrySlice(grid, grid.constant_field(np.eye(3)), h0=constant_three_form(grid, c))
    fam = static_flow(slc, 0.0, 1.0, nodes=5)
    v = SpacetimeFunction.from_callable(fam, lambda t: np.ones(grid.shape))
    out = conj_heat_op(v).values
    assert np.max(np.abs(out + 1.5 * c * c)) < 1e-12


def test_spacetime_function_validation(circle):
    with pytest.raises(HeatError):
        SpacetimeFunction(circle, np.zeros((3, 64)))
    two = static_flow(circle.slice_at(0.0), 0.0, 1.0, nodes=2)
    u = SpacetimeFunction.from_callable(two, lambda t: np.zeros(64))
    with pytest.raises(HeatError):
        u.time_derivative()


# -- flows ----------------------------------------------------------------------


def test_heat_flow_constant(circle):
    u = heat_flow(np.full((64,), 2.5), 0.0, 0.7, circle)
    assert np.max(np.abs(u - 2.5)) < 1e-12


def test_heat_flow_mode_decay(circle):
    x = circle.backend.axis_coords(0)
    u = heat_flow(np.cos(x), 0.0, 0.5, circle)
    assert np.max(np.abs(u - np.exp(-0.5) * np.cos(x))) < 1e-6


def test_heat_flow_time_validation(circle):
    with pytest.raises(HeatError):
        heat_flow(np.zeros(64), 0.5, 0.2, circle)


def test_heat_flow_warns_on_coarse_substeps(circle):
    with pytest.warns(UserWarning, match="stability"):
        heat_flow(np.zeros(64), 0.0, 1.0, circle, substeps=2)


def test_conj_flow_mass_pairing(torus_grf):
    # int P*_{t,s} 1 dV_{g(s)} = Vol(g(t))
    v = conj_flow(np.ones((8,) * 3), 0.1, 0.0, torus_grf)
    lhs = torus_grf.backend.integrate(v, density=torus_grf.slice_at(0.0).sqrt_detg)
    rhs = torus_grf.slice_at(0.1).volume()
    assert abs(lhs - rhs) < 1e-6
    assert rhs == pytest.approx((1.0 + 3.0 * 0.1) ** 0.5, abs=1e-10)


def test_forward_backward_pairing_constant_in_time(torus_grf):
    u0 = 1.0 + 0.5 * FourierScalar((1.0,) * 3, (1, 0, 0)).sample(torus_grf.backend)
    vT = 1.0 + 0.3 * FourierScalar((1.0,) * 3, (0, 1, 0), phase=0.7).sample(torus_grf.backend)
    u = SpacetimeFunction.from_initial(torus_grf, u0)
    v = SpacetimeFunction.from_terminal(torus_grf, vT)
    pair = [
        torus_grf.backend.integrate(
            u.values[m] * v.values[m], density=torus_grf.slice_index(m).sqrt_detg
        )
        for m in range(len(torus_grf.ts))
    ]
    assert np.max(np.abs(np.diff(pair))) < 1e-6


# -- kernels ---------------------------------------------------------------------


def test_kernel_matches_wrapped_gaussian():
    grid = PeriodicGrid((256,), (2.0 * np.pi,))
    slc = GeometrySlice(grid, grid.constant_field(np.eye(1)))
    fam = static_flow(slc, 0.0, 0.1, nodes=5)
    K = heat_kernel(np.array([np.pi]), 0.1, 0.05, fam)
    assert abs(K.mass() - 1.0) < 1e-6
    var = 2.0 * 0.05
    xs = grid.axis_coords(0)
    wg = np.zeros_like(xs)
    for m in range(-8, 9):
        wg += np.exp(-((xs - np.pi + 2.0 * np.pi * m) ** 2) / (2.0 * var)) / math.sqrt(2.0 * np.pi * var)
    assert np.max(np.abs(K.density - wg)) < 1e-4


def test_kernel_variance_is_twice_elapsed():
    L = 20.0
    grid = PeriodicGrid((256,), (L,))
    slc = GeometrySlice(grid, grid.constant_field(np.eye(1)))
    fam = static_flow(slc, 0.0, 0.5, nodes=5)
    K = heat_kernel(np.array([L / 2]), 0.5, 0.0, fam)
    z = grid.axis_coords(0)
    assert K.variance_of(z) == pytest.approx(2.0 * 0.5, rel=1e-5)


def test_kernel_mass_on_evolving_background(torus_grf):
    K = heat_kernel(np.array([0.5, 0.5, 0.5]), 0.1, 0.0, torus_grf)
    assert abs(K.mass() - 1.0) < 1e-6
    assert K.clipped_mass < 1e-8
    assert float(np.min(K.density)) >= 0.0


def test_kernel_refuses_underresolved_width(circle):
    with pytest.raises(HeatError, match="width"):
        heat_kernel(np.array([np.pi]), 1.0, 1.0 - 1e-4, circle)


def test_kernel_needs_grid_backend():
    from grflow.backends import HomogeneousModel

    model = HomogeneousModel.su2(1.0)
    fam = static_flow(GeometrySlice(model, np.eye(3)), 0.0, 1.0)
    with pytest.raises(HeatError):
        heat_kernel(np.zeros(3), 1.0, 0.0, fam)


def test_propagator_composition():
    grid = PeriodicGrid((64,), (2.0 * np.pi,))
    slc = GeometrySlice(grid, grid.constant_field(np.eye(1)))
    fam = static_flow(slc, 0.0, 0.3, nodes=7)
    T, s, r = 0.3, 0.15, 0.0
    direct = heat_kernel(np.array([np.pi]), T, r, fam)
    K_Ts = heat_kernel(np.array([np.pi]), T, s, fam)
    M_sr = kernel_matrix(s, r, fam)
    composed = np.tensordot(K_Ts.weights.ravel(), M_sr.reshape(64, 64), axes=1)
    assert np.max(np.abs(composed - direct.density)) < 1e-5


# -- duality -----------------------------------------------------------------------


def test_duality_trivial_static_flat(circle):
    one = SpacetimeFunction.from_callable(circle, lambda t: np.ones(64))
    assert duality_residual(one, one, circle) < 1e-12


def test_duality_refinement_order():
    errs = []
    for N, dt in ((8, 2e-3), (16, 5e-4)):
        sol = ricci2d(N, dt)
        X, Y = sol.backend.coords()
        u = SpacetimeFunction.from_callable(sol, lambda t: np.exp(-t) * np.sin(2 * np.pi * X) + 2.0)
        v = SpacetimeFunction.from_callable(
            sol, lambda t: 1.5 + np.exp(t) * np.cos(2 * np.pi * (X + Y)) + 0.5 * t * np.sin(2 * np.pi * X)
        )
        errs.append(duality_residual(u, v, sol))
    assert errs[1] < errs[0] / 4.0   # at least 2nd order per (h, dt) halving step


def test_duality_rejects_off_node_times(circle):
    one = SpacetimeFunction.from_callable(circle, lambda t: np.ones(64))
    with pytest.raises(HeatError):
        duality_residual(one, one, circle, 0.0, 0.123456)


# -- parabolic Bochner identities ---------------------------------------------------


def test_bochner_residuals_vanish_on_constants(torus_grf):
    u = SpacetimeFunction.from_callable(torus_grf, lambda t: np.full((8,) * 3, 2.0))
    assert np.max(np.abs(bochner_residual_1(u, torus_grf).values)) < 1e-12
    assert np.max(np.abs(bochner_residual_2(u, "square", torus_grf).values)) < 1e-12
    assert np.max(np.abs(bochner_residual_3(u, "reciprocal", torus_grf).values)) < 1e-12


def test_bochner_1_refinement_with_torsion():
    errs = []
    for N, dt in ((8, 5e-3), (16, 1.25e-3)):
        sol = torus_grf_stored(N, dt)
        u = mode_solution(sol, shift=2.0)
        errs.append(float(np.max(np.abs(bochner_residual_1(u, sol).values))))
    assert errs[1] < errs[0] / 4.0


def test_bochner_2_on_mode():
    sol = torus_grf_stored(16, 1.25e-3)
    u = mode_solution(sol, shift=2.0)
    res = bochner_residual_2(u, "square", sol)
    # box u itself carries the discretization error; the composition identity
    # residual stays at that level
    assert np.max(np.abs(res.values)) < 5.0
    coarse = torus_grf_stored(8, 5e-3)
    res8 = bochner_residual_2(mode_solution(coarse, shift=2.0), "square", coarse)
    assert np.max(np.abs(res.values)) < np.max(np.abs(res8.values)) / 4.0


def test_bochner_3_unit_psi_doubles_identity_1():
    sol = torus_grf_stored(8, 5e-3)
    u = mode_solution(sol, shift=2.0)
    r3 = bochner_residual_3(u, "unit", sol).values
    r1 = 2.0 * bochner_residual_1(u, sol).values
    assert np.max(np.abs(r3 - r1)) < 1e-10


def test_bochner_domain_guard(torus_grf):
    u = SpacetimeFunction.from_callable(torus_grf, lambda t: np.full((8,) * 3, -1.0))
    with pytest.raises(HeatError):
        bochner_residual_2(u, "xlogx", torus_grf)
    with pytest.raises(HeatError):
        bochner_residual_3(u, "reciprocal", torus_grf)
    with pytest.raises(HeatError):
        bochner_residual_2(u, "no-such-function", torus_grf)


# -- intertwining relations ----------------------------------------------------------


def test_intertwine_constant_data():
    sol = ricci2d(8, 2e-3)
    u0 = np.full((8, 8), 4.0)
    assert intertwine_check_1(u0, sol, 0.0, 0.05) < 1e-12
    assert intertwine_check_2(u0, sol, 0.0, 0.05) < 1e-12


def test_intertwine_refinement_order():
    e1, e2 = [], []
    for N, dt in ((8, 2e-3), (16, 5e-4)):
        sol = ricci2d(N, dt)
        u0 = 2.0 + FourierScalar((1.0, 1.0), (1, 1), amp=0.5).sample(sol.backend)
        e1.append(intertwine_check_1(u0, sol, 0.0, 0.05))
        e2.append(intertwine_check_2(u0, sol, 0.0, 0.05))
    assert e1[1] < e1[0] / 4.0
    assert e2[1] < e2[0] / 4.0


def test_intertwine_with_torsion_background():
    # the torsion quarter-term in the Bismut Hessian norm is load-bearing
    # here: the relation only closes at this order with it included
    e1, e2 = [], []
    for N, dt in ((8, 5e-3), (16, 1.25e-3)):
        sol = torus_grf_stored(N, dt)
        u0 = 2.0 + FourierScalar((1.0,) * 3, (1, 0, 0), amp=0.5).sample(sol.backend)
        e1.append(intertwine_check_1(u0, sol, 0.0, 0.05))
        e2.append(intertwine_check_2(u0, sol, 0.0, 0.05))
    assert e1[1] < e1[0] / 4.0
    assert e2[1] < e2[0] / 4.0


def test_intertwine_2_needs_positive_data():
    sol = ricci2d(8, 2e-3)
    u0 = FourierScalar((1.0, 1.0), (1, 0), amp=1.0).sample(sol.backend)   # signed
    with pytest.raises(HeatError):
        intertwine_check_2(u0, sol, 0.0, 0.05)


# -- kernel-measure inequalities --------------------------------------------------------


def test_poincare_equality_after_mean_removal(torus_grf):
    nu = heat_kernel(np.array([0.5, 0.5, 0.5]), 0.1, 0.0, torus_grf)
    rep = poincare_check(np.full((8,) * 3, 7.0), np.array([0.5, 0.5, 0.5]), 0.0, 0.1, torus_grf, nu=nu)
    assert rep.verdict == "PASS"
    assert abs(rep.lhs) < 1e-12 and abs(rep.rhs) < 1e-12


def test_poincare_logsob_pass_on_grf(torus_grf):
    x0 = np.array([0.5, 0.5, 0.5])
    nu = heat_kernel(x0, 0.1, 0.0, torus_grf)
    phi = 0.3 + FourierScalar((1.0,) * 3, (1, 1, 0), amp=1.0).sample(torus_grf.backend)
    rp = poincare_check(phi, x0, 0.0, 0.1, torus_grf, nu=nu)
    rl = logsob_check(phi, x0, 0.0, 0.1, torus_grf, nu=nu)
    assert rp.verdict == "PASS" and rp.slack > 0.0
    assert rl.verdict == "PASS" and rl.slack > 0.0
    assert rp.inputs["kernel_mass"] == pytest.approx(1.0, abs=1e-6)


def test_poincare_near_equality_linear_mode():
    # nearly-linear test function on a long flat circle: the variance bound
    # is saturated in the splitting direction
    L = 40.0
    grid = PeriodicGrid((128,), (L,))
    slc = GeometrySlice(grid, grid.constant_field(np.eye(1)))
    fam = static_flow(slc, 0.0, 1.0, nodes=5)
    z = grid.axis_coords(0)
    phi = np.sin(2.0 * np.pi * (z - L / 2) / L)
    rep = poincare_check(phi, np.array([L / 2]), 0.0, 1.0, fam)
    assert rep.verdict == "PASS"
    assert rep.lhs / rep.rhs >= 0.95


def test_logsob_rejects_zero_function(torus_grf):
    with pytest.raises(HeatError):
        logsob_check(np.zeros((8,) * 3), np.array([0.5, 0.5, 0.5]), 0.0, 0.1, torus_grf)
