"""Generalized Ricci flow integration.

The flow evolves a metric / 2-form pair by

    dg/dt = -2 Ric + (1/2) H^2,      db/dt = -d* H,      H = H0 + db,

equivalently d/dt (g - b) = -2 Rc_B with Rc_B the Bismut Ricci tensor.
Time stepping is classical fixed-step RK4; solutions store the right-hand
side at every kept node so cubic Hermite interpolation in time is exact at
nodes and 4th-order accurate between them.
"""

from __future__ import annotations

import warnings

import numpy as np

from .backends import BackendError
from .geometry import (
    GeometrySlice,
    antisymmetrize2,
    antisymmetrize3,
    defect_tensor,
    grf_rhs_fast,
    grf_rhs_slice,
)

BLOWUP_FACTOR = 1e6


class FlowError(RuntimeError):
    pass


class BlowupError(FlowError):
    """Metric sup-norm exceeded the blow-up cap; carries the last good time."""

    def __init__(self, t, norm):
        super().__init__(f"flow blow-up at t = {t:.6g} (|g|_inf = {norm:.3e})")
        self.t = t
        self.norm = norm


class CoverageError(FlowError):
    """Requested time outside the stored flow interval."""


def grf_rhs(slc: GeometrySlice):
    """Right-hand side (dg/dt, db/dt) of the flow at one slice."""
    return grf_rhs_slice(slc)


def _spd_ok(g):
    try:
        np.linalg.cholesky(g)
        return True
    except np.linalg.LinAlgError:
        return False


class FlowSolution:
    """Flow trajectory on a fixed time grid with stored RHS values."""

    def __init__(self, backend, h0, ts, gs, bs, dgs, dbs, meta=None):
        self.backend = backend
        self.h0 = np.asarray(h0, dtype=float)
        self.ts = np.asarray(ts, dtype=float)
        self.gs = np.asarray(gs, dtype=float)
        self.bs = np.asarray(bs, dtype=float)
        self.dgs = np.asarray(dgs, dtype=float)
        self.dbs = np.asarray(dbs, dtype=float)
        self.meta = dict(meta or {})
        if not (len(self.ts) == len(self.gs) == len(self.bs) == len(self.dgs) == len(self.dbs)):
            raise FlowError("inconsistent trajectory arrays")
        self._slice_cache = {}

    @property
    def t0(self):
        return float(self.ts[0])

    @property
    def t1(self):
        return float(self.ts[-1])

    def _locate(self, t):
        span = self.t1 - self.t0
        slack = 1e-10 * max(1.0, abs(span))
        if t < self.t0 - slack or t > self.t1 + slack:
            raise CoverageError(
                f"t = {t:.6g} outside stored interval [{self.t0:.6g}, {self.t1:.6g}]"
            )
        t = min(max(t, self.t0), self.t1)
        m = int(np.searchsorted(self.ts, t, side="right")) - 1
        m = min(max(m, 0), len(self.ts) - 2) if len(self.ts) > 1 else 0
        return m, t

    def _hermite(self, ys, ms, t, derivative=False):
        if len(self.ts) == 1:
            return ms[0].copy() if derivative else ys[0].copy()
        m, t = self._locate(t)
        t0, t1 = self.ts[m], self.ts[m + 1]
        dt = t1 - t0
        th = (t - t0) / dt
        y0, y1 = ys[m], ys[m + 1]
        m0, m1 = ms[m], ms[m + 1]
        if not derivative:
            h00 = (1.0 + 2.0 * th) * (1.0 - th) ** 2
            h10 = th * (1.0 - th) ** 2
            h01 = th * th * (3.0 - 2.0 * th)
            h11 = th * th * (th - 1.0)
            return h00 * y0 + h10 * dt * m0 + h01 * y1 + h11 * dt * m1
        d00 = 6.0 * th * (th - 1.0)
        d10 = 3.0 * th * th - 4.0 * th + 1.0
        d01 = -6.0 * th * (th - 1.0)
        d11 = 3.0 * th * th - 2.0 * th
        return (d00 * y0 + d01 * y1) / dt + d10 * m0 + d11 * m1

    def g_at(self, t):
        return self._hermite(self.gs, self.dgs, t)

    def b_at(self, t):
        return self._hermite(self.bs, self.dbs, t)

    def dg_at(self, t):
        return self._hermite(self.gs, self.dgs, t, derivative=True)

    def db_at(self, t):
        return self._hermite(self.bs, self.dbs, t, derivative=True)

    def slice_at(self, t, cache=False):
        if cache:
            key = round(float(t), 14)
            hit = self._slice_cache.get(key)
            if hit is not None:
                return hit
        slc = GeometrySlice(
            self.backend, self.g_at(t), self.b_at(t), self.h0, t=t, validate=False
        )
        if cache:
            if len(self._slice_cache) > 600:
                self._slice_cache.clear()
            self._slice_cache[key] = slc
        return slc

    def slice_index(self, m):
        return GeometrySlice(
            self.backend, self.gs[m], self.bs[m], self.h0, t=self.ts[m], validate=False
        )

    def defect_at(self, t):
        """Rc_B + (1/2) d/dt(g - b) of the stored family at time t."""
        slc = self.slice_at(t)
        return defect_tensor(slc, self.dg_at(t), self.db_at(t))

    def residual_norm(self, max_samples=33):
        """Max over sampled interior nodes of the centered-difference flow
        residual |(y_{m+1} - y_{m-1}) / 2 dt + 2 Rc_B|_inf, y = g - b."""
        M = len(self.ts)
        if M < 3:
            return 0.0
        idx = np.unique(np.linspace(1, M - 2, min(max_samples, M - 2)).astype(int))
        worst = 0.0
        for m in idx:
            dt0 = self.ts[m + 1] - self.ts[m - 1]
            dy = ((self.gs[m + 1] - self.bs[m + 1]) - (self.gs[m - 1] - self.bs[m - 1])) / dt0
            res = dy + 2.0 * self.slice_index(int(m)).bismut.total
            worst = max(worst, float(np.max(np.abs(res))))
        return worst


def run_flow(initial: GeometrySlice, t_final, dt, store_every=1):
    """Integrate the flow from `initial.t` to `t_final` with fixed-step RK4.

    Raises BlowupError when |g|_inf exceeds 1e6 times its initial value and
    FlowError if the metric loses positivity.
    """
    backend = initial.backend
    h0 = initial.h0
    t0 = initial.t
    if t_final <= t0:
        raise FlowError("t_final must exceed the initial time")
    dt = float(dt)
    nsteps = int(round((t_final - t0) / dt))
    if abs(t0 + nsteps * dt - t_final) > 1e-9 * max(1.0, abs(t_final)):
        raise FlowError("(t_final - t0) must be an integer multiple of dt")
    store_every = max(1, int(store_every))

    if backend.grid_ndim:
        # parabolic stability heuristic: the linearized flow diffuses with
        # coefficient ~2 g^{-1}, and the RK4 real-axis stability limit is
        # lam dt <= 2.78 with lam = (16/3) sum_a max(g^{aa}) / h_a^2
        ginv = np.linalg.inv(initial.g)
        lam = (16.0 / 3.0) * sum(
            float(np.max(ginv[..., a, a])) / initial.backend.h[a] ** 2
            for a in range(backend.n)
        )
        if 2.0 * lam * dt > 2.78:
            warnings.warn(
                f"dt = {dt:.3g} exceeds the RK4 diffusion stability estimate "
                f"{2.78 / (2.0 * lam):.3g}; expect blow-up",
                stacklevel=2,
            )

    cap = BLOWUP_FACTOR * float(np.max(np.abs(initial.g)))

    def rhs(g, b):
        return grf_rhs_fast(backend, g, b, h0)

    g = initial.g.copy()
    b = antisymmetrize2(initial.b)
    h0 = antisymmetrize3(h0)
    ts, gs, bs, dgs, dbs = [], [], [], [], []

    def store(t, g, b, k):
        ts.append(t)
        gs.append(g.copy())
        bs.append(b.copy())
        dgs.append(k[0].copy())
        dbs.append(k[1].copy())

    k1 = rhs(g, b)
    store(t0, g, b, k1)
    t = t0
    for step in range(nsteps):
        k1g, k1b = k1
        k2g, k2b = rhs(g + 0.5 * dt * k1g, b + 0.5 * dt * k1b)
        k3g, k3b = rhs(g + 0.5 * dt * k2g, b + 0.5 * dt * k2b)
        k4g, k4b = rhs(g + dt * k3g, b + dt * k3b)
        g = g + (dt / 6.0) * (k1g + 2.0 * k2g + 2.0 * k3g + k4g)
        b = b + (dt / 6.0) * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)
        t = t0 + (step + 1) * dt
        norm = float(np.max(np.abs(g)))
        if norm > cap:
            raise BlowupError(t, norm)
        if not _spd_ok(g):
            raise FlowError(f"metric lost positivity at t = {t:.6g}")
        k1 = rhs(g, b)
        if (step + 1) % store_every == 0 or step + 1 == nsteps:
            store(t, g, b, k1)

    meta = {"integrator": "rk4", "dt": dt, "steps": nsteps, "store_every": store_every}
    sol = FlowSolution(backend, h0, ts, gs, bs, dgs, dbs, meta)
    sol.meta["residual_norm"] = sol.residual_norm()
    return sol


def static_flow(slc: GeometrySlice, t0, t1, nodes=9):
    """Constant-in-time family (not necessarily a flow solution)."""
    ts = np.linspace(t0, t1, max(2, int(nodes)))
    zeros2 = np.zeros_like(slc.g)
    gs = np.broadcast_to(slc.g, (len(ts),) + slc.g.shape).copy()
    bs = np.broadcast_to(slc.b, (len(ts),) + slc.b.shape).copy()
    dgs = np.broadcast_to(zeros2, (len(ts),) + zeros2.shape).copy()
    dbs = dgs.copy()
    return FlowSolution(slc.backend, slc.h0, ts, gs, bs, dgs, dbs, {"integrator": "static"})


def perturb_family(sol: FlowSolution, eps, mode="conformal-drift", beta=None):
    """Deform a stored family so it is not a flow solution.

    conformal-drift: g -> (1 + eps t) g; b-drift: b -> b + eps t beta.  The
    deformed family's defect tensor Rc_B + (1/2) d/dt(g - b) is available
    through FlowSolution.defect_at.
    """
    ts = sol.ts
    if mode == "conformal-drift":
        fac = (1.0 + eps * ts).reshape((-1,) + (1,) * (sol.gs.ndim - 1))
        gs = fac * sol.gs
        dgs = eps * sol.gs + fac * sol.dgs
        bs, dbs = sol.bs.copy(), sol.dbs.copy()
    elif mode == "b-drift":
        if beta is None:
            raise FlowError("b-drift perturbation needs a 2-form beta")
        beta = 0.5 * (beta - np.swapaxes(beta, -1, -2))
        tfac = ts.reshape((-1,) + (1,) * (sol.bs.ndim - 1))
        gs, dgs = sol.gs.copy(), sol.dgs.copy()
        bs = sol.bs + eps * tfac * beta
        dbs = sol.dbs + eps * beta
    else:
        raise FlowError(f"unknown perturbation mode {mode!r}")
    meta = dict(sol.meta)
    meta["perturbation"] = {"mode": mode, "eps": float(eps)}
    return FlowSolution(sol.backend, sol.h0, ts, gs, bs, dgs, dbs, meta)
