"""Heat and conjugate heat flow on an evolving geometry.

The heat operator is box = d/dt - Laplacian(g(t)); its formal adjoint with
respect to the evolving volume measure is

    box* = -d/dt - Laplacian + R - (1/4)|H|^2,

so conjugate solutions propagate backward in time and pair with forward
solutions through d/dt int u v dV = 0.  Solvers are method-of-lines RK4 with
an automatic parabolic substep bound; kernels are built by running the
conjugate flow from a normalized grid delta (briefly pre-smoothed so the
initial data is representable).
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .geometry import GeometrySlice, dstack
from .report import VerificationReport

RK4_DIFFUSION_LIMIT = 2.78
CFL_SAFETY = 0.6


class HeatError(RuntimeError):
    pass


# -- pointwise helpers ---------------------------------------------------------


def inner_grad(slc, a, b):
    """Metric inner product of the gradients of two scalar fields."""
    da = dstack(slc.backend, a)
    db = dstack(slc.backend, b)
    return np.sum(np.matmul(slc.ginv, da[..., None])[..., 0] * db, axis=-1)


def bismut_hessian_norm2(slc, u):
    """|grad grad u|^2 for the torsion connection; equals the symmetric part
    |DDu|^2 plus (1/4)|grad u  hook H|^2."""
    T = slc.hessian_bismut(u)
    Tup = np.matmul(np.matmul(slc.ginv, T), slc.ginv)
    return np.sum(T * Tup, axis=(-2, -1))


def _hessian_cubed(slc, u):
    """<D^2 u, grad u (x) grad u> (the torsion part drops out here)."""
    P = slc.hessian_lc(u)
    v = slc.grad(u)
    return np.sum(np.matmul(P, v[..., None])[..., 0] * v, axis=-1)


# -- analytic test functions for the composition identities --------------------


class AnalyticFunction:
    """Scalar function with two derivatives and a one-sided domain guard."""

    def __init__(self, name, f, d1, d2, lower=None):
        self.name = name
        self.f = f
        self.d1 = d1
        self.d2 = d2
        self.lower = lower

    def check_domain(self, u):
        if self.lower is not None and float(np.min(u)) <= self.lower:
            raise HeatError(
                f"{self.name} needs values > {self.lower}, got min {float(np.min(u)):.4g}"
            )

    def __call__(self, u):
        return self.f(u)


SQUARE = AnalyticFunction("square", lambda x: x * x, lambda x: 2.0 * x, lambda x: 2.0 * np.ones_like(x))
XLOGX = AnalyticFunction("xlogx", lambda x: x * np.log(x), lambda x: np.log(x) + 1.0, lambda x: 1.0 / x, lower=0.0)
RECIPROCAL = AnalyticFunction("reciprocal", lambda x: 1.0 / x, lambda x: -1.0 / x**2, lambda x: 2.0 / x**3, lower=0.0)
UNIT = AnalyticFunction("unit", lambda x: np.ones_like(x), lambda x: np.zeros_like(x), lambda x: np.zeros_like(x))

ANALYTIC_CATALOG = {f.name: f for f in (SQUARE, XLOGX, RECIPROCAL, UNIT)}


def _as_analytic(f):
    if isinstance(f, AnalyticFunction):
        return f
    try:
        return ANALYTIC_CATALOG[f]
    except KeyError:
        raise HeatError(f"unknown analytic function {f!r}") from None


# -- time stepping --------------------------------------------------------------


def _is_static(flow):
    return (
        float(np.max(np.abs(flow.dgs))) == 0.0
        and float(np.max(np.abs(flow.dbs))) == 0.0
        and float(np.max(np.abs(flow.gs - flow.gs[0]))) == 0.0
        and float(np.max(np.abs(flow.bs - flow.bs[0]))) == 0.0
    )


def _provider(flow):
    """Geometry lookup tau -> GeometrySlice, constant-time families share one
    slice so their derived tensors are built once."""
    if _is_static(flow):
        slc = flow.slice_at(flow.t0, cache=True)
        return lambda tau: slc
    return lambda tau: flow.slice_at(tau, cache=True)


def diffusion_rate(slc):
    """Spectral-radius estimate of the discrete Laplacian on this slice."""
    backend = slc.backend
    if not backend.grid_ndim:
        return 0.0
    return (16.0 / 3.0) * sum(
        float(np.max(slc.ginv[..., a, a])) / backend.h[a] ** 2
        for a in range(backend.n)
    )


def _auto_substeps(flow, s, t):
    span = t - s
    rate = max(
        diffusion_rate(flow.slice_at(tau, cache=True))
        for tau in (s, 0.5 * (s + t), t)
    )
    if rate == 0.0:
        return 1
    dt_stable = CFL_SAFETY * RK4_DIFFUSION_LIMIT / rate
    return max(1, int(math.ceil(span / dt_stable)))


def _check_user_steps(flow, s, t, substeps):
    rate = diffusion_rate(flow.slice_at(s, cache=True))
    if rate > 0.0 and (t - s) / substeps > RK4_DIFFUSION_LIMIT / rate:
        warnings.warn(
            f"substep {(t - s) / substeps:.3g} exceeds the diffusion stability "
            f"bound {RK4_DIFFUSION_LIMIT / rate:.3g}",
            stacklevel=3,
        )


def heat_flow(u0, s, t, flow, substeps=None):
    """Propagate u0 from time s to time t along the forward heat flow."""
    if t < s:
        raise HeatError("heat_flow needs t >= s")
    u = np.array(u0, dtype=float)
    if t == s:
        return u
    if substeps is None:
        substeps = _auto_substeps(flow, s, t)
    else:
        substeps = max(1, int(substeps))
        _check_user_steps(flow, s, t, substeps)
    dt = (t - s) / substeps
    geo = _provider(flow)
    for m in range(substeps):
        tau = s + m * dt
        s0 = geo(tau)
        s1 = geo(tau + 0.5 * dt)
        s2 = geo(tau + dt)
        k1 = s0.laplacian_fn(u)
        k2 = s1.laplacian_fn(u + 0.5 * dt * k1)
        k3 = s1.laplacian_fn(u + 0.5 * dt * k2)
        k4 = s2.laplacian_fn(u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return u


def _conj_rhs(slc, v):
    pot = slc.scalar - 0.25 * slc.h_norm2
    return slc.laplacian_fn(v) - pot * v


def conj_flow(vT, t, s, flow, substeps=None):
    """Propagate vT backward from time t to time s along the conjugate flow."""
    if t < s:
        raise HeatError("conj_flow needs t >= s")
    v = np.array(vT, dtype=float)
    if t == s:
        return v
    if substeps is None:
        substeps = _auto_substeps(flow, s, t)
    else:
        substeps = max(1, int(substeps))
        _check_user_steps(flow, s, t, substeps)
    dt = (t - s) / substeps
    geo = _provider(flow)
    # integrate in sigma = t - tau, which runs the diffusion forward
    for m in range(substeps):
        sig = m * dt
        s0 = geo(t - sig)
        s1 = geo(t - sig - 0.5 * dt)
        s2 = geo(t - sig - dt)
        k1 = _conj_rhs(s0, v)
        k2 = _conj_rhs(s1, v + 0.5 * dt * k1)
        k3 = _conj_rhs(s1, v + 0.5 * dt * k2)
        k4 = _conj_rhs(s2, v + dt * k3)
        v = v + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return v


# -- spacetime functions and the operators --------------------------------------


def node_slices(flow):
    cached = getattr(flow, "_node_slices", None)
    if cached is None:
        cached = [flow.slice_index(m) for m in range(len(flow.ts))]
        flow._node_slices = cached
    return cached


class SpacetimeFunction:
    """Scalar field sampled at every stored time node of a flow solution."""

    def __init__(self, flow, values):
        self.flow = flow
        spatial = flow.backend.shape if flow.backend.grid_ndim else ()
        values = np.asarray(values, dtype=float)
        want = (len(flow.ts),) + spatial
        if values.shape != want:
            raise HeatError(f"value array shape {values.shape} != {want}")
        self.values = values

    @classmethod
    def from_callable(cls, flow, fn):
        """fn(t) -> spatial array at each stored node time."""
        return cls(flow, np.stack([np.asarray(fn(t), dtype=float) for t in flow.ts]))

    @classmethod
    def from_initial(cls, flow, u0, substeps=None):
        """Forward heat solution through all stored nodes, starting at the
        first one."""
        ts = flow.ts
        vals = [np.array(u0, dtype=float)]
        for m in range(1, len(ts)):
            vals.append(heat_flow(vals[-1], ts[m - 1], ts[m], flow, substeps=substeps))
        return cls(flow, np.stack(vals))

    @classmethod
    def from_terminal(cls, flow, vT, substeps=None):
        """Backward conjugate heat solution through all stored nodes, ending
        at the last one."""
        ts = flow.ts
        vals = [np.array(vT, dtype=float)]
        for m in range(len(ts) - 1, 0, -1):
            vals.append(conj_flow(vals[-1], ts[m], ts[m - 1], flow, substeps=substeps))
        return cls(flow, np.stack(vals[::-1]))

    @property
    def ts(self):
        return self.flow.ts

    def time_derivative(self):
        if len(self.ts) < 3:
            raise HeatError("need at least 3 time nodes for time derivatives")
        return np.gradient(self.values, self.ts, axis=0, edge_order=2)

    def map_nodes(self, fn):
        """fn(slice, values) applied at every node; returns stacked array."""
        slcs = node_slices(self.flow)
        return np.stack([fn(slcs[m], self.values[m]) for m in range(len(self.ts))])


def heat_op(u: SpacetimeFunction) -> SpacetimeFunction:
    """box u = du/dt - Laplacian u at every stored node."""
    lap = u.map_nodes(lambda slc, vals: slc.laplacian_fn(vals))
    return SpacetimeFunction(u.flow, u.time_derivative() - lap)


def conj_heat_op(v: SpacetimeFunction) -> SpacetimeFunction:
    """box* v = -dv/dt - Laplacian v + (R - |H|^2/4) v at every stored node."""
    def term(slc, vals):
        return -slc.laplacian_fn(vals) + (slc.scalar - 0.25 * slc.h_norm2) * vals

    return SpacetimeFunction(v.flow, -v.time_derivative() + v.map_nodes(term))


def _node_span(flow, t1, t2):
    ts = flow.ts
    slack = 1e-9 * max(1.0, abs(flow.t1 - flow.t0))
    i1 = int(np.argmin(np.abs(ts - t1)))
    i2 = int(np.argmin(np.abs(ts - t2)))
    if abs(ts[i1] - t1) > slack or abs(ts[i2] - t2) > slack:
        raise HeatError("t1 and t2 must be stored node times")
    if i2 <= i1:
        raise HeatError("need t1 < t2")
    return i1, i2


def duality_residual(u: SpacetimeFunction, v: SpacetimeFunction, flow, t1=None, t2=None):
    """|int_{t1}^{t2} int (box u) v - (box* v) u dV dt  -  [int u v dV]|."""
    t1 = flow.t0 if t1 is None else t1
    t2 = flow.t1 if t2 is None else t2
    i1, i2 = _node_span(flow, t1, t2)
    slcs = node_slices(flow)
    bu = heat_op(u).values
    bv = conj_heat_op(v).values
    vals = []
    for m in range(i1, i2 + 1):
        slc = slcs[m]
        integrand = bu[m] * v.values[m] - bv[m] * u.values[m]
        vals.append(flow.backend.integrate(integrand, density=slc.sqrt_detg))
    lhs = float(np.trapezoid(np.asarray(vals), x=flow.ts[i1 : i2 + 1]))
    pair = [
        flow.backend.integrate(u.values[m] * v.values[m], density=slcs[m].sqrt_detg)
        for m in (i1, i2)
    ]
    return abs(lhs - (pair[1] - pair[0]))


# -- parabolic Bochner identities ------------------------------------------------


def bochner_residual_1(u: SpacetimeFunction, flow) -> SpacetimeFunction:
    """Residual of  box (1/2)|grad u|^2 = -|grad grad u|^2 + <grad u, grad box u>."""
    bu = heat_op(u)
    w = SpacetimeFunction(flow, 0.5 * u.map_nodes(lambda s, x: s.grad_norm2(x)))
    lhs = heat_op(w).values
    slcs = node_slices(flow)
    rhs = np.stack(
        [
            -bismut_hessian_norm2(slcs[m], u.values[m])
            + inner_grad(slcs[m], u.values[m], bu.values[m])
            for m in range(len(flow.ts))
        ]
    )
    return SpacetimeFunction(flow, lhs - rhs)


def bochner_residual_2(u: SpacetimeFunction, phi, flow) -> SpacetimeFunction:
    """Residual of  box phi(u) = phi'(u) box u - phi''(u) |grad u|^2."""
    phi = _as_analytic(phi)
    phi.check_domain(u.values)
    U = SpacetimeFunction(flow, phi(u.values))
    bu = heat_op(u).values
    gn2 = u.map_nodes(lambda s, x: s.grad_norm2(x))
    rhs = phi.d1(u.values) * bu - phi.d2(u.values) * gn2
    return SpacetimeFunction(flow, heat_op(U).values - rhs)


def bochner_residual_3(u: SpacetimeFunction, psi, flow) -> SpacetimeFunction:
    """Residual of the composite identity for U = psi(u) |grad u|^2:

    box U = -2 psi (|grad grad u|^2 - <grad u, grad box u>)
            - 4 psi' <D^2 u, grad u (x) grad u> - psi'' |grad u|^4
            + psi' (box u) |grad u|^2.
    """
    psi = _as_analytic(psi)
    psi.check_domain(u.values)
    slcs = node_slices(flow)
    bu = heat_op(u).values
    gn2 = u.map_nodes(lambda s, x: s.grad_norm2(x))
    U = SpacetimeFunction(flow, psi(u.values) * gn2)
    M = len(flow.ts)
    rhs = np.stack(
        [
            -2.0
            * psi(u.values[m])
            * (
                bismut_hessian_norm2(slcs[m], u.values[m])
                - inner_grad(slcs[m], u.values[m], bu[m])
            )
            - 4.0 * psi.d1(u.values[m]) * _hessian_cubed(slcs[m], u.values[m])
            - psi.d2(u.values[m]) * gn2[m] ** 2
            + psi.d1(u.values[m]) * bu[m] * gn2[m]
            for m in range(M)
        ]
    )
    return SpacetimeFunction(flow, heat_op(U).values - rhs)


# -- intertwining relations -------------------------------------------------------


def _coupled_march(u0, y0, source, flow, s, t, substeps):
    """March du/dt = Lap u, dy/dt = Lap y + source(slc, u) together so the
    Duhamel integral int_s^t P_{t,r} source(r) dr accumulates inside y at the
    integrator's own order."""
    if substeps is None:
        substeps = _auto_substeps(flow, s, t)
    dt = (t - s) / substeps
    geo = _provider(flow)

    def rhs(slc, w):
        lap = slc.laplacian_fn(w)
        lap[1] += source(slc, w[0])
        return lap

    w = np.stack([np.asarray(u0, dtype=float), np.asarray(y0, dtype=float)])
    for m in range(substeps):
        tau = s + m * dt
        s0 = geo(tau)
        s1 = geo(tau + 0.5 * dt)
        s2 = geo(tau + dt)
        k1 = rhs(s0, w)
        k2 = rhs(s1, w + 0.5 * dt * k1)
        k3 = rhs(s1, w + 0.5 * dt * k2)
        k4 = rhs(s2, w + dt * k3)
        w = w + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return w[0], w[1]


def intertwine_check_1(u0, flow, s, t, substeps=None):
    """Sup-norm residual of

    |grad P_{t,s} u|^2 = P_{t,s}(|grad u|^2) - 2 int_s^t P_{t,r}(|grad grad P_{r,s} u|^2) dr.

    The r-integral is accumulated as a Duhamel source coupled to the forward
    solve, so no quadrature over stored nodes is involved.
    """
    if t < s:
        raise HeatError("need s <= t")
    u0 = np.asarray(u0, dtype=float)

    def source(slc, u):
        return -2.0 * bismut_hessian_norm2(slc, u)

    y0 = flow.slice_at(s, cache=True).grad_norm2(u0)
    u_t, rhs = _coupled_march(u0, y0, source, flow, s, t, substeps)
    lhs = flow.slice_at(t, cache=True).grad_norm2(u_t)
    return float(np.max(np.abs(lhs - rhs)))


def intertwine_check_2(u0, flow, s, t, substeps=None):
    """Sup-norm residual of the normalized version

    |grad P_{t,s} u|^2 / P_{t,s} u = P_{t,s}(|grad u|^2 / u)
        - 2 int_s^t P_{t,r}(P_{r,s} u |grad grad log P_{r,s} u|^2) dr,

    which needs strictly positive data."""
    if t < s:
        raise HeatError("need s <= t")
    u0 = np.asarray(u0, dtype=float)
    if float(np.min(u0)) <= 0.0:
        raise HeatError("intertwine_check_2 needs strictly positive data")

    def source(slc, u):
        if float(np.min(u)) <= 0.0:
            raise HeatError("heat flow lost positivity (resolution too coarse)")
        return -2.0 * u * bismut_hessian_norm2(slc, np.log(u))

    slc_s = flow.slice_at(s, cache=True)
    u_t, rhs = _coupled_march(u0, slc_s.grad_norm2(u0) / u0, source, flow, s, t, substeps)
    lhs = flow.slice_at(t, cache=True).grad_norm2(u_t) / u_t
    return float(np.max(np.abs(lhs - rhs)))


# -- heat kernel measures ----------------------------------------------------------


class KernelMeasure:
    """Kernel density at time s for a base point (x0, T), with the induced
    measure weights density * dV_{g(s)} at every node."""

    def __init__(self, flow, x0, T, s, density, clipped_mass=0.0):
        self.flow = flow
        self.backend = flow.backend
        self.x0 = np.asarray(x0, dtype=float)
        self.T = float(T)
        self.s = float(s)
        self.density = np.asarray(density, dtype=float)
        self.clipped_mass = float(clipped_mass)
        self.slice_s = flow.slice_at(self.s, cache=True)
        self.weights = self.density * self.slice_s.sqrt_detg * self.backend.cell_volume

    def mass(self):
        return float(np.sum(self.weights))

    def expect(self, values):
        return float(np.sum(self.weights * np.asarray(values, dtype=float)))

    def variance_of(self, values):
        m = self.expect(values) / self.mass()
        return self.expect((np.asarray(values, dtype=float) - m) ** 2)


def _grid_delta(flow, x0, T):
    backend = flow.backend
    idx = backend.node_index(x0)
    slc = flow.slice_at(T, cache=True)
    delta = np.zeros(backend.shape)
    delta[idx] = 1.0 / (backend.cell_volume * float(slc.sqrt_detg[idx]))
    return delta


def _frozen_smooth(slc, u, duration):
    """Plain heat smoothing with the geometry frozen at one slice."""
    rate = diffusion_rate(slc)
    nsub = max(1, int(math.ceil(duration * rate / (CFL_SAFETY * RK4_DIFFUSION_LIMIT))))
    dt = duration / nsub
    for _ in range(nsub):
        k1 = slc.laplacian_fn(u)
        k2 = slc.laplacian_fn(u + 0.5 * dt * k1)
        k3 = slc.laplacian_fn(u + 0.5 * dt * k2)
        k4 = slc.laplacian_fn(u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return u


def heat_kernel(x0, T, s, flow, substeps=None) -> KernelMeasure:
    """Kernel measure nu = p_{T,s}(x0, .) dV_{g(s)} built by a backward
    conjugate solve from a normalized grid delta at (x0, T).

    The delta is pre-smoothed for a duration 4 h_max^2 with the geometry
    frozen at T (and that duration is deducted from the conjugate solve, so
    the total diffusion time is exactly T - s); negative undershoots of the
    final density are clipped and the clipped mass recorded.
    """
    backend = flow.backend
    if not backend.grid_ndim:
        raise HeatError("kernel measures need a grid backend")
    if not T > s:
        raise HeatError("need s < T")
    hmax = float(np.max(backend.h))
    if math.sqrt(2.0 * (T - s)) < 3.0 * hmax:
        raise HeatError(
            f"kernel width {math.sqrt(2.0 * (T - s)):.3g} under-resolved "
            f"(< 3 h = {3.0 * hmax:.3g}); reduce s or refine the grid"
        )
    delta = _grid_delta(flow, x0, T)
    t_pre = min(4.0 * hmax**2, 0.5 * (T - s))
    v = _frozen_smooth(flow.slice_at(T, cache=True), delta, t_pre)
    # renormalize before the conjugate solve, which then preserves the mass
    slc_pre = flow.slice_at(T - t_pre, cache=True)
    v /= backend.integrate(v, density=slc_pre.sqrt_detg)
    v = conj_flow(v, T - t_pre, s, flow, substeps=substeps)
    clipped = -backend.integrate(
        np.minimum(v, 0.0), density=flow.slice_at(s, cache=True).sqrt_detg
    )
    v = np.maximum(v, 0.0)
    return KernelMeasure(flow, x0, T, s, v, clipped_mass=float(clipped))


def kernel_matrix(T, s, flow, substeps=None):
    """All-sources kernel p_{T,s}(y, .) as an array indexed by the flattened
    source node y; used for propagator-composition checks."""
    backend = flow.backend
    if not backend.grid_ndim:
        raise HeatError("kernel measures need a grid backend")
    shape = backend.shape
    B = int(np.prod(shape))
    slcT = flow.slice_at(T, cache=True)
    deltas = np.zeros((B,) + shape)
    flat = deltas.reshape(B, B)
    flat[np.arange(B), np.arange(B)] = 1.0 / (
        backend.cell_volume * slcT.sqrt_detg.reshape(B)
    )
    hmax = float(np.max(backend.h))
    t_pre = min(4.0 * hmax**2, 0.5 * (T - s))
    v = _frozen_smooth(slcT, deltas, t_pre)
    slc_pre = flow.slice_at(T - t_pre, cache=True)
    mass = np.sum(v * slc_pre.sqrt_detg, axis=tuple(range(1, v.ndim))) * backend.cell_volume
    v /= mass.reshape((B,) + (1,) * len(shape))
    return conj_flow(v, T - t_pre, s, flow, substeps=substeps)


# -- kernel-measure functional inequalities -----------------------------------------


def _sample_values(phi, backend):
    if hasattr(phi, "sample"):
        return np.asarray(phi.sample(backend), dtype=float)
    return np.asarray(phi, dtype=float)


def grid_margin(backend, scale):
    """Discretization allowance for kernel-quadrature inequalities."""
    hmax = float(np.max(backend.h)) if backend.grid_ndim else 0.0
    return abs(scale) * (50.0 * hmax**4 + 1e-9) + 1e-12


def poincare_check(phi, x0, s, T, flow, nu=None) -> VerificationReport:
    """Variance bound  int phi^2 dnu <= 2 (T - s) int |grad phi|^2 dnu  for
    the kernel measure based at (x0, T), after removing the nu-mean of phi."""
    nu = heat_kernel(x0, T, s, flow) if nu is None else nu
    phi_vals = _sample_values(phi, flow.backend)
    mean = nu.expect(phi_vals) / nu.mass()
    ph = phi_vals - mean
    lhs = nu.expect(ph * ph)
    rhs = 2.0 * (T - s) * nu.expect(nu.slice_s.grad_norm2(ph))
    return VerificationReport(
        name="poincare",
        lhs=lhs,
        rhs=rhs,
        margin=grid_margin(flow.backend, max(abs(lhs), abs(rhs))),
        inputs={
            "x0": list(np.atleast_1d(np.asarray(x0, dtype=float))),
            "s": float(s),
            "T": float(T),
            "mean_removed": mean,
            "kernel_mass": nu.mass(),
        },
    )


def logsob_check(phi, x0, s, T, flow, nu=None) -> VerificationReport:
    """Entropy bound  int phi^2 log phi^2 dnu <= 4 (T - s) int |grad phi|^2 dnu
    after rescaling phi so that int phi^2 dnu = 1."""
    nu = heat_kernel(x0, T, s, flow) if nu is None else nu
    phi_vals = _sample_values(phi, flow.backend)
    norm = nu.expect(phi_vals * phi_vals) / nu.mass()
    if norm <= 0.0:
        raise HeatError("logsob_check needs phi with positive L2(nu) norm")
    ph = phi_vals / math.sqrt(norm)
    ph2 = ph * ph
    ent = np.where(ph2 > 0.0, ph2 * np.log(np.where(ph2 > 0.0, ph2, 1.0)), 0.0)
    lhs = nu.expect(ent)
    rhs = 4.0 * (T - s) * nu.expect(nu.slice_s.grad_norm2(ph))
    return VerificationReport(
        name="logsob",
        lhs=lhs,
        rhs=rhs,
        margin=grid_margin(flow.backend, max(abs(lhs), abs(rhs))),
        inputs={
            "x0": list(np.atleast_1d(np.asarray(x0, dtype=float))),
            "s": float(s),
            "T": float(T),
            "l2_normalization": norm,
            "kernel_mass": nu.mass(),
        },
    )
