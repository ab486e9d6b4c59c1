"""Flow integrator checks against closed-form solutions and fixed points.

Frozen expected values:
  * flat T^3, H = c dx^dy^dz: g(t) = (1 + 3 c^2 t)^{1/3} Id, b(t) = 0,
    volume ratio (1 + 3 c^2 t)^{1/2}
  * su(2) with H = lam * (frame Levi-Civita symbol): fixed point
  * dg/dt at a constant metric f*Id with constant H = c dx^dy^dz is
    (c^2 / f^2) Id
"""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from grflow.backends import HomogeneousModel, PeriodicGrid, levi_civita_symbol
from grflow.fields import FourierScalar, conformal_metric, constant_three_form
from grflow.flow import (
    BlowupError,
    CoverageError,
    FlowError,
    grf_rhs,
    perturb_family,
    run_flow,
    static_flow,
)
from grflow.geometry import GeometrySlice

LAM = 1.5


def torus_slice(c=1.0, f=1.0, n=8):
    grid = PeriodicGrid((n,) * 3, (1.0,) * 3)
    g = grid.constant_field(f * np.eye(3))
    return GeometrySlice(grid, g, h0=constant_three_form(grid, c))


def su2_slice(kappa, f=1.0):
    model = HomogeneousModel.su2(LAM)
    return GeometrySlice(model, f * np.eye(3), h0=kappa * levi_civita_symbol(3))


def test_rhs_constant_metric_constant_torsion():
    slc = torus_slice(c=1.5, f=2.0)
    dg, db = grf_rhs(slc)
    assert np.max(np.abs(dg - 0.5625 * np.eye(3))) < 1e-13
    assert np.max(np.abs(db)) < 1e-13


@pytest.mark.filterwarnings("ignore:dt =")
def test_torus_flow_matches_closed_form():
    slc = torus_slice(c=1.0)
    sol = run_flow(slc, t_final=1.0, dt=4e-3, store_every=10)
    # stored nodes carry the RK4 accuracy ...
    for t in (0.4, 0.8, 1.0):
        f = (1.0 + 3.0 * t) ** (1.0 / 3.0)
        err = np.max(np.abs(sol.g_at(t) - f * np.eye(3)))
        assert err < 1e-10 * f
    # ... and between nodes the cubic Hermite read-out is 4th order in the
    # node spacing (0.04 here)
    f = (1.0 + 3.0 * 0.25) ** (1.0 / 3.0)
    assert np.max(np.abs(sol.g_at(0.25) - f * np.eye(3))) < 1e-6
    assert np.max(np.abs(sol.b_at(1.0))) < 1e-12
    # volume doubles by t = 1
    v0 = sol.slice_at(0.0).volume()
    v1 = sol.slice_at(1.0).volume()
    assert v1 / v0 == pytest.approx(2.0, abs=1e-10)
    # centered-difference residual at node spacing 0.04 is O(0.04^2 |f'''|)
    assert sol.meta["residual_norm"] < 5e-3


def test_su2_fixed_point():
    slc = su2_slice(kappa=LAM)
    assert np.max(np.abs(slc.bismut.total)) < 1e-12
    sol = run_flow(slc, t_final=1.0, dt=0.01)
    assert np.max(np.abs(sol.g_at(1.0) - np.eye(3))) < 1e-10
    assert np.max(np.abs(sol.b_at(1.0))) < 1e-12
    assert np.max(np.abs(sol.slice_at(1.0).bismut.total)) < 1e-10


def test_su2_moving_flow_matches_ode_reference():
    # g = f(t) Id stays diagonal; f' = -lam^2 + kappa^2 / f^2
    kappa = 0.5
    slc = su2_slice(kappa=kappa)
    sol = run_flow(slc, t_final=0.3, dt=1e-3)

    ref = solve_ivp(
        lambda t, f: -LAM**2 + kappa**2 / f**2,
        (0.0, 0.3),
        [1.0],
        rtol=1e-12,
        atol=1e-14,
        dense_output=True,
    )
    for t in (0.1, 0.22, 0.3):
        f = ref.sol(t)[0]
        assert np.max(np.abs(sol.g_at(t) - f * np.eye(3))) < 1e-9


def test_hermite_interpolation_between_nodes():
    # the dominant error at dt = 0.05 is the RK4 global error itself, about
    # dt^4 here; interpolation must not degrade that order of magnitude
    kappa = 0.5
    coarse = run_flow(su2_slice(kappa), t_final=0.3, dt=0.05)
    fine = run_flow(su2_slice(kappa), t_final=0.3, dt=1e-3)
    for t in (0.013, 0.112, 0.274):
        assert np.max(np.abs(coarse.g_at(t) - fine.g_at(t))) < 2e-5
        assert np.max(np.abs(coarse.dg_at(t) - fine.dg_at(t))) < 1e-3


@pytest.mark.filterwarnings("ignore:dt =")
def test_defect_vanishes_on_solutions():
    sol = run_flow(torus_slice(c=1.0), t_final=0.2, dt=4e-3)
    for t in (0.0, 0.1, 0.2):
        assert np.max(np.abs(sol.defect_at(t))) < 1e-10


def test_conformal_drift_defect():
    eps = 0.3
    base = static_flow(su2_slice(kappa=LAM), 0.0, 1.0, nodes=11)
    fam = perturb_family(base, eps, mode="conformal-drift")
    # at t = 0 the curvature term still vanishes, so the defect is (eps/2) g
    d0 = fam.defect_at(0.0)
    assert np.max(np.abs(d0 - 0.5 * eps * np.eye(3))) < 1e-12
    # later the scaled metric is no longer Bismut flat
    dmid = fam.defect_at(1.0)
    assert np.max(np.abs(dmid - 0.5 * eps * np.eye(3))) > 1e-3
    assert fam.meta["perturbation"] == {"mode": "conformal-drift", "eps": eps}


def test_b_drift_defect():
    eps = 0.25
    beta = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.5], [0.0, -0.5, 0.0]])
    base = static_flow(su2_slice(kappa=LAM), 0.0, 1.0, nodes=11)
    fam = perturb_family(base, eps, mode="b-drift", beta=beta)
    # invariant 2-forms on su(2) are closed, so H and the curvature never
    # change and the defect is exactly -(eps/2) beta at every time
    for t in (0.0, 0.4, 1.0):
        assert np.max(np.abs(fam.defect_at(t) + 0.5 * eps * beta)) < 1e-12


def test_perturb_family_validation():
    base = static_flow(su2_slice(kappa=LAM), 0.0, 1.0)
    with pytest.raises(FlowError):
        perturb_family(base, 0.1, mode="b-drift")
    with pytest.raises(FlowError):
        perturb_family(base, 0.1, mode="nonsense")


def test_static_flow_residual_matches_curvature():
    slc = su2_slice(kappa=0.4)   # not a fixed point
    fam = static_flow(slc, 0.0, 1.0, nodes=9)
    expected = 2.0 * float(np.max(np.abs(slc.bismut.total)))
    assert fam.residual_norm() == pytest.approx(expected, rel=1e-12)
    assert np.max(np.abs(fam.defect_at(0.5) - slc.bismut.total)) < 1e-13


def test_run_flow_argument_validation():
    slc = su2_slice(kappa=LAM)
    with pytest.raises(FlowError):
        run_flow(slc, t_final=0.0, dt=0.01)
    with pytest.raises(FlowError):
        run_flow(slc, t_final=1.0, dt=0.3)   # not an integer multiple


def test_coverage_error_outside_interval():
    sol = run_flow(su2_slice(kappa=LAM), t_final=0.5, dt=0.05)
    with pytest.raises(CoverageError):
        sol.g_at(0.7)
    with pytest.raises(CoverageError):
        sol.g_at(-0.1)


def test_unstable_step_warns_then_blows_up():
    grid = PeriodicGrid((8,) * 3, (1.0,) * 3)
    phi = FourierScalar((1.0,) * 3, (1, 1, 0), amp=0.1).sample(grid)
    slc = GeometrySlice(grid, conformal_metric(grid, phi))
    with pytest.warns(UserWarning, match="stability"):
        with pytest.raises(FlowError):
            run_flow(slc, t_final=1.0, dt=0.1)


def test_stable_step_does_not_warn():
    import warnings

    slc = torus_slice(c=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run_flow(slc, t_final=0.01, dt=1e-3)


def test_store_every_node_layout():
    sol = run_flow(su2_slice(kappa=0.5), t_final=0.2, dt=0.01, store_every=5)
    assert len(sol.ts) == 5   # t = 0, 0.05, 0.1, 0.15, 0.2
    assert np.allclose(np.diff(sol.ts), 0.05)
    assert sol.t0 == 0.0
    assert sol.t1 == pytest.approx(0.2)


def test_blowup_error_reports_time():
    # pure reaction blow-up: large constant torsion inflates g, then the
    # shrinking H^2 term slows it down, so force blow-up with a huge cap hit
    grid = PeriodicGrid((8,) * 3, (1.0,) * 3)
    phi = FourierScalar((1.0,) * 3, (1, 0, 0), amp=0.2).sample(grid)
    slc = GeometrySlice(grid, conformal_metric(grid, phi))
    with pytest.warns(UserWarning):
        with pytest.raises(FlowError) as exc:
            run_flow(slc, t_final=2.0, dt=0.05)
    if isinstance(exc.value, BlowupError):
        assert 0.0 < exc.value.t <= 2.0
        assert exc.value.norm > 0.0
