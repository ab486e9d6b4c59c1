"""Cylinder functions on path space and their stochastic calculus.

A cylinder function is a product F(gamma) = prod_j f_j(X_{tau_j}) over a
partition 0 <= tau_1 < ... < tau_k <= T' of backward time, with smooth slot
functions carrying value / gradient / Hessian evaluators.  Its conditional
expectation F_tau is computed deterministically: march the last slot forward
in real time with the heat flow and merge slot functions at partition
crossings.  Sampled paths enter only through outer expectations, so Monte
Carlo error and PDE error stay separated.

Parallel gradients live in the starting fibre (T_x M, g_{T'}(x)); a vector v
at the step-k point is carried there by the path transport S_k, and all inner
products use the fixed matrix g_{T'}(x).  With L the Cholesky factor of that
matrix, <a, b> = (L^T a) . (L^T b), and the pairing of a fibre vector with a
Gaussian increment is (L^T v) . dW.

The mixed parallel Hessian differentiates the transported raised gradient
componentwise (metric variation enters through the raised-gradient field, no
Christoffel convention), which makes the chain-rule identities for
|grad F|^2 and log F exact algebraic properties of the evaluators.
"""

from dataclasses import dataclass

import numpy as np

from .fields import ScalarFunction
from .geometry import dstack, second_partials
from .heat import _is_static, heat_flow
from .report import VerificationReport
from .stochastic import _reduce_mean, iter_path_chunks

_TTOL = 1e-9


class PathspaceError(ValueError):
    pass


class GridScalar(ScalarFunction):
    """Scalar function backed by grid node values.

    Values interpolate the nodes; derivatives interpolate the same stencil
    fields the PDE operators use, so grid-backed and analytic slots satisfy
    the same evaluator contract.
    """

    def __init__(self, backend, values):
        if backend.grid_ndim == 0:
            raise PathspaceError("GridScalar needs a grid backend")
        self.backend = backend
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != backend.shape:
            raise PathspaceError("node values do not match the grid shape")
        self._d = None
        self._dd = None

    def value(self, pts):
        return self.backend.interp(self.values, np.atleast_2d(pts))

    def grad(self, pts):
        if self._d is None:
            self._d = dstack(self.backend, self.values)
        return self.backend.interp(self._d, np.atleast_2d(pts))

    def hess(self, pts):
        if self._dd is None:
            self._dd = second_partials(self.backend, self.values)
        return self.backend.interp(self._dd, np.atleast_2d(pts))

    def sample(self, grid):
        if grid is not self.backend:
            raise PathspaceError("GridScalar sampled on a different grid")
        return self.values


class CylinderFunction:
    """Product of slot functions evaluated at fixed backward times."""

    def __init__(self, taus, slots):
        taus = tuple(float(t) for t in np.atleast_1d(np.asarray(taus, dtype=float)))
        slots = tuple(slots)
        if len(taus) != len(slots) or not taus:
            raise PathspaceError("need one slot function per partition time")
        if any(t < -_TTOL for t in taus):
            raise PathspaceError("partition times must be nonnegative")
        if any(t2 - t1 <= _TTOL for t1, t2 in zip(taus, taus[1:])):
            raise PathspaceError("partition times must be strictly increasing")
        self.taus = taus
        self.slots = slots

    @property
    def k(self):
        return len(self.taus)

    def path_indices(self, taus_grid):
        """Map partition times onto a uniform path time grid."""
        dtau = taus_grid[1] - taus_grid[0]
        idx = []
        for t in self.taus:
            j = int(round(t / dtau))
            if abs(t - j * dtau) > _TTOL or not 0 <= j < len(taus_grid):
                raise PathspaceError(f"partition time {t} is off the path grid")
            idx.append(j)
        return idx

    def slot_values(self, points):
        """Per-slot values at points[:, j] -> list of (m,) arrays."""
        return [
            np.asarray(slot.value(points[:, j]), dtype=float)
            for j, slot in enumerate(self.slots)
        ]

    def value(self, points):
        points = np.asarray(points, dtype=float)
        vals = self.slot_values(points)
        out = vals[0].copy()
        for v in vals[1:]:
            out *= v
        return out

    def self_check(self, pts, h=1e-5):
        """Max relative error of grad/hess against central differences."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = pts.shape[1]
        worst = 0.0
        for slot in self.slots:
            g = np.asarray(slot.grad(pts), dtype=float)
            hs = np.asarray(slot.hess(pts), dtype=float)
            scale = max(1.0, np.max(np.abs(g)), np.max(np.abs(hs)))
            for a in range(n):
                da = np.zeros(n)
                da[a] = h
                fp, fm = slot.value(pts + da), slot.value(pts - da)
                worst = max(worst, np.max(np.abs((fp - fm) / (2 * h) - g[:, a])) / scale)
                gp, gm = slot.grad(pts + da), slot.grad(pts - da)
                fd = (np.asarray(gp) - np.asarray(gm)) / (2 * h)
                worst = max(worst, np.max(np.abs(fd - hs[:, a, :])) / scale)
        return worst


def _leave_one_out(vals):
    """coef_j = prod_{i != j} vals[i] for a short list of (m,) arrays."""
    k = len(vals)
    out = []
    for j in range(k):
        c = None
        for i in range(k):
            if i == j:
                continue
            c = vals[i].copy() if c is None else c * vals[i]
        out.append(c if c is not None else np.ones_like(vals[j]))
    return out


class _InterpField:
    """Pointwise evaluation of one precomputed field, skipping the
    interpolation pass when the field is spatially constant."""

    def __init__(self, backend, field):
        self.backend = backend
        arr = np.asarray(field, dtype=float)
        self.comp = arr.shape[backend.grid_ndim:]
        if backend.grid_ndim == 0:
            self.const = True
            self._row = arr
            return
        rows = arr.reshape(-1, int(np.prod(self.comp)) if self.comp else 1)
        self.const = bool(np.all(rows == rows[0]))
        self._row = rows[0].reshape(self.comp).copy() if self.const else None
        self.field = arr

    def at(self, pts):
        m = len(pts)
        if self.const:
            return np.broadcast_to(self._row, (m,) + self.comp)
        return self.backend.interp(self.field, pts)


def _ginv_probe(flow, t, cache):
    key = "static" if _is_static(flow) else round(float(t), 12)
    if key not in cache:
        cache[key] = _InterpField(flow.backend, flow.slice_at(t, cache=True).ginv)
    return cache[key]


def base_frame(flow, x, T_prime):
    """(g_{T'}(x), its Cholesky factor L) at the path starting point."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    slc = flow.slice_at(T_prime, cache=True)
    if flow.backend.grid_ndim:
        gT = flow.backend.interp(slc.g, x)[0]
    else:
        gT = slc.g
    return gT, np.linalg.cholesky(gT)


def _transported_terms(F, flow, T_prime, points, transports, cache=None):
    """Per-slot (coef, vec): coef_j = prod_{i != j} f_i and vec_j the slot
    gradient raised at its own slice and carried to the starting fibre."""
    points = np.asarray(points, dtype=float)
    cache = {} if cache is None else cache
    vals = F.slot_values(points)
    coefs = _leave_one_out(vals)
    vecs = []
    for j, slot in enumerate(F.slots):
        pts = points[:, j]
        gi = _ginv_probe(flow, T_prime - F.taus[j], cache).at(pts)
        raised = (gi @ np.asarray(slot.grad(pts), dtype=float)[:, :, None])[:, :, 0]
        vecs.append((transports[:, j] @ raised[:, :, None])[:, :, 0])
    return vals, coefs, vecs


def cylinder_gradient(F, flow, T_prime, points, transports, sigma):
    """Parallel gradient of F at backward time sigma, in the starting fibre.

    points: (m, k, n) slot evaluation points; transports: (m, k, n, n) the
    S matrices at the partition times.  Sums slot terms with tau_j >= sigma.
    """
    points = np.asarray(points, dtype=float)
    m, _, n = points.shape
    _, coefs, vecs = _transported_terms(F, flow, T_prime, points, transports)
    out = np.zeros((m, n))
    for j, t in enumerate(F.taus):
        if t >= sigma - _TTOL:
            out += coefs[j][:, None] * vecs[j]
    return out


def _gamma_probe(flow, t, cache):
    key = ("gamma", "static" if _is_static(flow) else round(float(t), 12))
    if key not in cache:
        cache[key] = _InterpField(flow.backend, flow.slice_at(t, cache=True).gamma_bismut)
    return cache[key]


def _raised_covariant_hessian(slot, flow, t, pts, cache):
    """M^{ab} = g^{ac} [ D_c w^b + Gamma^b_{cd} w^d ] with w = g^{-1} Df.

    Gamma is the Bismut connection of the slice at time t, the same
    connection that rotates the path transports: the quadratic variation of
    the transported raised gradient S w(X) involves exactly this covariant
    derivative, so it is the Hessian that enters the evolution identities
    for |grad F|^2.  On flat torsion-free backgrounds Gamma = 0 and this
    reduces to the plain raised Hessian.
    """
    gi = _ginv_probe(flow, t, cache)
    giv = gi.at(pts)
    Df = np.asarray(slot.grad(pts), dtype=float)
    DDf = np.asarray(slot.hess(pts), dtype=float)
    inner = np.einsum("pbj,pcj->pcb", giv, DDf)
    w = None
    if not gi.const:
        key = ("dginv", round(float(t), 12))
        if key not in cache:
            cache[key] = _InterpField(flow.backend, dstack(flow.backend, gi.field))
        dgi = cache[key].at(pts)      # (m, n, n, n): [p, c, b, j] = D_c ginv^{bj}
        inner = inner + np.einsum("pcbj,pj->pcb", dgi, Df)
    gam = _gamma_probe(flow, t, cache)
    if not (gam.const and not np.any(gam._row)):
        w = (giv @ Df[:, :, None])[:, :, 0]
        gamv = gam.at(pts)            # (m, n, n, n): [p, b, c, d] = Gamma^b_{cd}
        inner = inner + np.einsum("pbcd,pd->pcb", gamv, w)
    return np.einsum("pac,pcb->pab", giv, inner)


def cylinder_hessian(F, flow, T_prime, points, transports, sigma, tau):
    """Mixed parallel Hessian: rows differentiate at times >= tau, columns
    at times >= sigma; all terms transported to the starting fibre."""
    points = np.asarray(points, dtype=float)
    m, _, n = points.shape
    cache = {}
    vals, coefs, vecs = _transported_terms(F, flow, T_prime, points, transports, cache)
    rows = [j for j, t in enumerate(F.taus) if t >= tau - _TTOL]
    cols = [j for j, t in enumerate(F.taus) if t >= sigma - _TTOL]
    out = np.zeros((m, n, n))
    for u in rows:
        for v in cols:
            if u == v:
                H = _raised_plain_hessian(F.slots[u], flow, T_prime - F.taus[u], points[:, u], cache)
                Su = transports[:, u]
                out += coefs[u][:, None, None] * (Su @ H @ np.swapaxes(Su, 1, 2))
            else:
                c = None
                for i in range(F.k):
                    if i in (u, v):
                        continue
                    c = vals[i].copy() if c is None else c * vals[i]
                if c is None:
                    c = np.ones(m)
                out += c[:, None, None] * vecs[u][:, :, None] * vecs[v][:, None, :]
    return out


# -- induced martingales ---------------------------------------------------------


class MartingaleField:
    """Conditional expectations F_tau of a cylinder function along a flow.

    For tau in the interval (p_l, p_{l+1}] between partition times the field
    tail(tau) solves the forward heat equation in real time with terminal
    data merged at p_{l+1}; then F_tau = prod_{j <= l} f_j(X_{p_j}) *
    tail(tau)(X_tau).  Values are continuous across partition times by
    construction (the closed right end carries the merged field).
    """

    def __init__(self, F, flow, T_prime=None):
        if flow.backend.grid_ndim == 0:
            raise PathspaceError("martingale fields need a grid backend")
        self.F = F
        self.flow = flow
        self.T_prime = float(flow.t1 if T_prime is None else T_prime)
        if F.taus[-1] > self.T_prime + _TTOL:
            raise PathspaceError("partition extends past the observation time")
        if flow.t0 > _TTOL or self.T_prime > flow.t1 + _TTOL:
            raise PathspaceError("flow does not cover the path interval")
        self._snapshots = {}
        self._ones = np.ones(flow.backend.shape)

    def _merge(self, field, j):
        slot = self.F.slots[j]
        return field * np.asarray(slot.sample(self.flow.backend), dtype=float)

    def _march(self, tau_from, field, tau_to):
        """Advance a tail field from tau_from down to tau_to, merging slot
        functions at every partition time crossed (closed right ends)."""
        taus = self.F.taus
        tau = tau_from
        while tau > tau_to + _TTOL:
            crossings = [t for t in taus if t < tau - _TTOL and t > tau_to + _TTOL]
            nxt = max(crossings) if crossings else tau_to
            field = heat_flow(field, self.T_prime - tau, self.T_prime - nxt, self.flow)
            for j in reversed(range(len(taus))):
                if abs(taus[j] - nxt) <= _TTOL:
                    field = self._merge(field, j)
            tau = nxt
        return field

    def prefix_count(self, tau):
        """Slots evaluated as separate factors at backward time tau."""
        return sum(1 for t in self.F.taus if t < tau - _TTOL)

    def tail(self, tau):
        if tau < -_TTOL or tau > self.T_prime + _TTOL:
            raise PathspaceError("tau outside [0, T']")
        key = round(float(tau), 12)
        if key in self._snapshots:
            return self._snapshots[key]
        start_tau, start = self.T_prime, self._ones
        for j in reversed(range(len(self.F.taus))):
            if abs(self.F.taus[j] - self.T_prime) <= _TTOL:
                start = self._merge(start, j)
        better = [t for t in self._snapshots if t >= tau - _TTOL]
        if better:
            start_tau = min(better)
            start = self._snapshots[start_tau]
        field = self._march(start_tau, start, tau)
        self._snapshots[key] = field
        return field

    def extended(self, tau):
        """F_tau as a cylinder function: prefix slots plus the tail slot."""
        ell = self.prefix_count(tau)
        tail_slot = GridScalar(self.flow.backend, self.tail(tau))
        return CylinderFunction(
            self.F.taus[:ell] + (float(tau),), self.F.slots[:ell] + (tail_slot,)
        )

    def value_points(self, tau, prefix_points, tail_points):
        """F_tau from explicit evaluation points (m, l, n) and (m, n)."""
        ell = self.prefix_count(tau)
        out = np.asarray(
            GridScalar(self.flow.backend, self.tail(tau)).value(tail_points),
            dtype=float,
        ).copy()
        for j in range(ell):
            out *= np.asarray(self.F.slots[j].value(prefix_points[:, j]), dtype=float)
        return out

    def trajectory(self, chunk_obj):
        """F_{tau_k}(gamma) for every step of a path chunk -> (m, K+1)."""
        taus = chunk_obj.taus
        xs = chunk_obj.xs
        m, steps = xs.shape[0], len(taus)
        idx = self.F.path_indices(taus)
        slot_vals = [
            np.asarray(self.F.slots[j].value(xs[:, idx[j]]), dtype=float)
            for j in range(self.F.k)
        ]
        out = np.empty((m, steps))
        field = None
        tau_here = None
        for k in range(steps - 1, -1, -1):
            tau = taus[k]
            if field is None:
                field = self.tail(tau)
            else:
                field = self._march(tau_here, field, tau)
            tau_here = tau
            vals = self.flow.backend.interp(field, xs[:, k])
            ell = self.prefix_count(tau)
            for j in range(ell):
                vals = vals * slot_vals[j]
            out[:, k] = vals
        return out


def induced_martingale(F, flow, T_prime=None):
    return MartingaleField(F, flow, T_prime)


def parallel_gradient(F, mf, path, sigma, tau, tau_side="right"):
    """The parallel gradient of the martingale F_tau at backward time sigma,
    transported to the starting fibre.  Zero whenever tau < sigma; at
    tau == sigma the left limit is zero, the right limit is the tail term."""
    if tau_side not in ("left", "right"):
        raise PathspaceError("tau_side must be 'left' or 'right'")
    n = mf.flow.backend.n
    if tau < sigma - _TTOL or (tau_side == "left" and tau <= sigma + _TTOL):
        return np.zeros(n)
    ext = mf.extended(tau)
    idx = ext.path_indices(path.taus)
    points = path.xs[idx][None]
    transports = path.Ss[idx][None]
    return cylinder_gradient(ext, mf.flow, mf.T_prime, points, transports, sigma)[0]


def hessian_parallel(F, flow, path, sigma, tau, T_prime=None):
    """Mixed transported Hessian of the cylinder function F along a path."""
    T_prime = float(flow.t1 if T_prime is None else T_prime)
    idx = F.path_indices(path.taus)
    points = path.xs[idx][None]
    transports = path.Ss[idx][None]
    return cylinder_hessian(F, flow, T_prime, points, transports, sigma, tau)[0]


def log_hessian(F, flow, path, sigma, tau, T_prime=None):
    """Hessian of log F: F^{-1} Hess F - F^{-2} (grad_tau F) x (grad_sigma F)."""
    T_prime = float(flow.t1 if T_prime is None else T_prime)
    idx = F.path_indices(path.taus)
    points = path.xs[idx][None]
    transports = path.Ss[idx][None]
    val = float(F.value(points)[0])
    if val <= 0.0:
        raise PathspaceError("log_hessian needs F > 0 along the path")
    H = cylinder_hessian(F, flow, T_prime, points, transports, sigma, tau)[0]
    gt = cylinder_gradient(F, flow, T_prime, points, transports, tau)[0]
    gs = cylinder_gradient(F, flow, T_prime, points, transports, sigma)[0]
    return H / val - np.outer(gt, gs) / val ** 2


# -- martingale representation ----------------------------------------------------


@dataclass
class ResidualStats:
    """Per-path residuals of the martingale representation, with the two
    sides of the quadratic-variation identity."""

    residuals: np.ndarray
    rms: float
    sq_increments_mean: float
    sq_increments_stderr: float
    grad_quadrature_mean: float
    grad_quadrature_stderr: float


def martingale_rep_residual(F, flow, cfg, base_K=None, chunk=4096, threads=1):
    """Residuals F_{T'} - F_0 - sum_k <grad_k, dW_k> over sampled paths.

    The integrand at step k is the parallel gradient of F_{tau_k} at its own
    time: prefix product times the transported tail gradient.  Also returns
    both sides of the quadratic-variation identity
    E[sum (dF)^2] = 2 E[sum |grad|^2 dtau].
    """
    mf = induced_martingale(F, flow, cfg.T_prime)
    _, L = base_frame(flow, cfg.x, cfg.T_prime)
    backend = flow.backend
    gcache = {}
    residuals = np.empty(cfg.N)
    sq_inc = np.empty(cfg.N)
    grad_quad = np.empty(cfg.N)
    for ch in iter_path_chunks(cfg, flow, chunk=chunk, base_K=base_K, threads=threads):
        m = len(ch)
        vals = mf.trajectory(ch)
        idx = F.path_indices(ch.taus)
        slot_vals = [
            np.asarray(F.slots[j].value(ch.xs[:, idx[j]]), dtype=float)
            for j in range(F.k)
        ]
        ito = np.zeros(m)
        g2sum = np.zeros(m)
        field = None
        tau_here = None
        for k in range(cfg.K - 1, -1, -1):
            tau = ch.taus[k]
            if field is None:
                field = mf.tail(tau)
            else:
                field = mf._march(tau_here, field, tau)
            tau_here = tau
            dfield = dstack(backend, field)
            Df = backend.interp(dfield, ch.xs[:, k])
            gi = _ginv_probe(flow, cfg.T_prime - tau, gcache).at(ch.xs[:, k])
            raised = (gi @ Df[:, :, None])[:, :, 0]
            vec = (ch.Ss[:, k] @ raised[:, :, None])[:, :, 0]
            for j in range(mf.prefix_count(tau)):
                vec = vec * slot_vals[j][:, None]
            vL = vec @ L
            ito += np.einsum("pj,pj->p", vL, ch.dWs[:, k])
            g2sum += np.einsum("pj,pj->p", vL, vL)
        res = vals[:, -1] - vals[:, 0] - ito
        residuals[ch.indices] = res
        sq_inc[ch.indices] = np.sum(np.diff(vals, axis=1) ** 2, axis=1)
        grad_quad[ch.indices] = 2.0 * cfg.dtau * g2sum
    rms = float(np.sqrt(np.add.reduce(residuals ** 2) / cfg.N))
    m1, s1 = _reduce_mean(sq_inc)
    m2, s2 = _reduce_mean(grad_quad)
    return ResidualStats(residuals, rms, float(m1), float(s1), float(m2), float(s2))


# -- directional derivatives and integration by parts ------------------------------


class HPath:
    """Finite-energy variation curve in the starting fibre with h_0 = 0."""

    def __init__(self, taus, values):
        self.taus = np.asarray(taus, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 2 or len(self.values) != len(self.taus):
            raise PathspaceError("need one fibre vector per time node")
        if np.max(np.abs(self.values[0])) > _TTOL:
            raise PathspaceError("variation curves start at h_0 = 0")

    @classmethod
    def ramp(cls, cfg, direction):
        taus = np.arange(cfg.K + 1) * cfg.dtau
        return cls(taus, taus[:, None] * np.asarray(direction, dtype=float))

    @classmethod
    def from_callable(cls, cfg, fn):
        taus = np.arange(cfg.K + 1) * cfg.dtau
        return cls(taus, np.stack([np.asarray(fn(t), dtype=float) for t in taus]))

    @property
    def hdot(self):
        return np.diff(self.values, axis=0) / np.diff(self.taus)[:, None]

    def energy(self, gbase=None):
        hd = self.hdot
        if gbase is not None:
            hd = hd @ np.linalg.cholesky(gbase)
        return float(np.sum(hd * hd) * (self.taus[1] - self.taus[0]))


def _dv_terms(F, flow, T_prime, h, ch, L):
    """D_V F per path: sum_j coef_j <h(tau_j), S_j grad_j f>."""
    idx = F.path_indices(ch.taus)
    points = ch.xs[:, idx]
    transports = ch.Ss[:, idx]
    _, coefs, vecs = _transported_terms(F, flow, T_prime, points, transports)
    out = np.zeros(len(ch))
    for j, kj in enumerate(idx):
        hL = h.values[kj] @ L
        out += coefs[j] * ((vecs[j] @ L) @ hL)
    return out


def dv_derivative(F, path, h, flow, T_prime=None):
    """Directional derivative of F along the variation h, single path."""
    T_prime = float(flow.t1 if T_prime is None else T_prime)
    _, L = base_frame(flow, path.xs[0], T_prime)
    ch = _SinglePathChunk(path)
    return float(_dv_terms(F, flow, T_prime, h, ch, L)[0])


class _SinglePathChunk:
    def __init__(self, path):
        self.taus = path.taus
        self.xs = path.xs[None]
        self.Ss = path.Ss[None]
        self.dWs = path.dWs[None]
        self.indices = np.array([0])

    def __len__(self):
        return 1


def defect_endomorphism(flow, t):
    """Coordinate endomorphism field of Rc_B + (1/2) d/dt (g - b) at time t.

    This is the quantity whose vanishing characterizes the flow; it also
    drives the Feynman-Kac transport ODE and the IBP weight below.
    """
    slc = flow.slice_at(t, cache=True)
    low = slc.bismut.total + 0.5 * (flow.dg_at(t) - flow.db_at(t))
    return np.matmul(slc.ginv, low)


def _weight_chunk(ch, h, gT, L, probes):
    """The stochastic-integral factor of the adjoint, per path:
    (1/2) sum_k <hdot_k + B_k^T-adjoint h_k, e_0 dW_k> with
    B_k = S_k A(t_k) S_k^{-1} transported to the starting fibre."""
    m = len(ch)
    K = len(ch.taus) - 1
    hd = h.hdot
    ginvT = np.linalg.inv(gT)
    out = np.zeros(m)
    for k in range(K):
        vec = np.broadcast_to(hd[k], (m, len(hd[k])))
        probe = probes[k]
        if probe is not None:
            A = probe.at(ch.xs[:, k])
            Sk = ch.Ss[:, k]
            B = Sk @ A @ np.linalg.inv(Sk)
            y = gT @ h.values[k]
            vec = vec + (B.transpose(0, 2, 1) @ y) @ ginvT.T
        out += np.einsum("pj,pj->p", vec @ L, ch.dWs[:, k])
    return 0.5 * out


def _weight_probes(cfg, flow):
    """Per-step interpolation probes for the defect endomorphism; None when
    the field vanishes identically (exact flows)."""
    backend = flow.backend
    if _is_static(flow):
        A = defect_endomorphism(flow, 0.0)
        probe = _InterpField(backend, A)
        if probe.const and np.max(np.abs(probe._row)) == 0.0:
            probe = None
        return [probe] * cfg.K
    probes = []
    for k in range(cfg.K):
        A = defect_endomorphism(flow, cfg.T_prime - k * cfg.dtau)
        probe = _InterpField(backend, A)
        if probe.const and np.max(np.abs(probe._row)) == 0.0:
            probe = None
        probes.append(probe)
    return probes


def dv_star_weight(path, h, flow, T_prime=None):
    """Adjoint weight along one path (see ibp_residual for the identity)."""
    T_prime = float(flow.t1 if T_prime is None else T_prime)
    gT, L = base_frame(flow, path.xs[0], T_prime)
    ch = _SinglePathChunk(path)

    class _Cfg:
        K = path.K
        dtau = path.taus[1] - path.taus[0]

    probes = _weight_probes(_Cfg, flow)
    return float(_weight_chunk(ch, h, gT, L, probes)[0])


def ibp_residual(F, G, h, cfg, flow, base_K=None, chunk=4096, threads=1, margin=0.0):
    """Integration by parts on path space:

        E[D_V F * G] = E[F * (-D_V G + weight * G)]

    with the adjoint weight (1/2) int <hdot + transported defect adjoint
    applied to h, dW>.  Returns a report whose lhs is |difference| with its
    standard error; margin absorbs the O(dtau) integrator bias.
    """
    gT, L = base_frame(flow, cfg.x, cfg.T_prime)
    probes = _weight_probes(cfg, flow)
    diffs = np.empty(cfg.N)
    lhs_vals = np.empty(cfg.N)
    for ch in iter_path_chunks(cfg, flow, chunk=chunk, base_K=base_K, threads=threads):
        idxF = F.path_indices(ch.taus)
        idxG = G.path_indices(ch.taus)
        Fv = F.value(ch.xs[:, idxF])
        Gv = G.value(ch.xs[:, idxG])
        dvF = _dv_terms(F, flow, cfg.T_prime, h, ch, L)
        dvG = _dv_terms(G, flow, cfg.T_prime, h, ch, L)
        w = _weight_chunk(ch, h, gT, L, probes)
        lhs = dvF * Gv
        rhs = Fv * (-dvG + w * Gv)
        lhs_vals[ch.indices] = lhs
        diffs[ch.indices] = lhs - rhs
    mean, se = _reduce_mean(diffs)
    lhs_mean, _ = _reduce_mean(lhs_vals)
    return VerificationReport(
        name="pathspace-ibp",
        lhs=float(abs(mean)),
        rhs=0.0,
        lhs_stderr=float(se),
        margin=margin,
        inputs={
            "K": cfg.K,
            "N": cfg.N,
            "T_prime": cfg.T_prime,
            "x": [float(v) for v in cfg.x],
            "lhs_mean": float(lhs_mean),
        },
        seeds=(cfg.seed,),
    )


# -- Malliavin norm and the OU quadratic form ---------------------------------------


def _grad_segments(F, flow, T_prime, ch, L):
    """Per path: partial sums V_l = sum_{j >= l} coef_j vec_j (in the
    starting fibre) and the partition times; the parallel gradient of F is
    piecewise constant, equal to V_l on (p_{l-1}, p_l]."""
    idx = F.path_indices(ch.taus)
    points = ch.xs[:, idx]
    transports = ch.Ss[:, idx]
    _, coefs, vecs = _transported_terms(F, flow, T_prime, points, transports)
    m, n = vecs[0].shape
    partial = np.zeros((F.k + 1, m, n))
    for j in range(F.k - 1, -1, -1):
        partial[j] = partial[j + 1] + coefs[j][:, None] * vecs[j]
    return partial


def _norm_integral(F, partial, tau_lo, tau_hi, L):
    """int_{tau_lo}^{tau_hi} |grad_tau F|^2 dtau, exact for the piecewise
    constant integrand (value V_l on (p_{l-1}, p_l])."""
    edges = [tau_lo] + [t for t in F.taus if tau_lo < t < tau_hi] + [tau_hi]
    out = 0.0
    for a, b in zip(edges, edges[1:]):
        mid = 0.5 * (a + b)
        l = sum(1 for t in F.taus if t < mid - _TTOL)
        V = partial[l]
        VL = V @ L
        out = out + (b - a) * np.einsum("pj,pj->p", VL, VL)
    return out


def malliavin_norm(F, path, flow, T_prime=None):
    """int_0^{T'} |grad_tau F|^2 dtau along one path."""
    T_prime = float(flow.t1 if T_prime is None else T_prime)
    _, L = base_frame(flow, path.xs[0], T_prime)
    ch = _SinglePathChunk(path)
    partial = _grad_segments(F, flow, T_prime, ch, L)
    val = _norm_integral(F, partial, 0.0, T_prime, L)
    return float(np.asarray(val)[0])


def ou_quadratic_form(F, tau1, tau2, cfg, flow, base_K=None, chunk=4096, threads=1):
    """Monte Carlo estimate (mean, stderr) of E[F L_{(tau1,tau2)} F], reduced
    through integration by parts to E[int_{tau1}^{tau2} |grad_tau F|^2 dtau]."""
    if not 0.0 <= tau1 <= tau2 <= cfg.T_prime + _TTOL:
        raise PathspaceError("need 0 <= tau1 <= tau2 <= T'")
    _, L = base_frame(flow, cfg.x, cfg.T_prime)
    vals = np.empty(cfg.N)
    for ch in iter_path_chunks(cfg, flow, chunk=chunk, base_K=base_K, threads=threads):
        partial = _grad_segments(F, flow, cfg.T_prime, ch, L)
        vals[ch.indices] = _norm_integral(F, partial, tau1, tau2, L)
    mean, se = _reduce_mean(vals)
    return float(mean), float(se)
