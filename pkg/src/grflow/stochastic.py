"""Horizontal Brownian motion in frame coordinates over backward time.

Paths run in backward time tau = T' - t from tau = 0 (the observation time
T') to tau = T' (the time-0 slice of the flow).  The state is a frame-bundle
point (x, e); one Stratonovich step reads

    dx   = e dW                 (horizontal motion, dW ~ N(0, 2 dtau Id))
    de   = -Gamma(dx) e + (1/2) g^{-1} (dg/dt + db/dt)^T e dtau

with Gamma the coefficients of the torsion-bearing connection and the drift
term the backward-time transport of the twisted time lift.  Increments use
the variance-2 convention dW^i dW^j = 2 delta_ij dtau; the factor lives in
_SQRT_VAR only.

Steps are Heun predictor-corrector (the SDE is Stratonovich), followed by a
polar retraction of the frame onto g-orthonormality at the new base point;
the pre-retraction drift is recorded per path.  Stochastic parallel
transport back to the starting fibre is S_k = e_0 e_k^{-1}.

Every path is reproducible in isolation: path i draws from a Philox stream
keyed by (seed, i), so results do not depend on chunking or thread count.
Estimators store one value per path and reduce once at the end.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .fields import ScalarFunction
from .heat import _is_static


class StochasticError(ValueError):
    pass


def _sqrt_var(dtau):
    # the variance-2 convention enters here and nowhere else
    return math.sqrt(2.0 * dtau)


@dataclass(frozen=True)
class PathConfig:
    """Monte Carlo run description: start x at time T', K uniform steps."""

    x: tuple
    T_prime: float
    K: int
    seed: int
    N: int

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))
        if self.K < 16:
            raise StochasticError("need at least 16 steps")
        if self.N < 1:
            raise StochasticError("need at least one path")
        if not self.T_prime > 0.0:
            raise StochasticError("T_prime must be positive")

    @property
    def dtau(self):
        return self.T_prime / self.K

    def tau_index(self, s):
        """Step index of the slice at time s (tau = T' - s), which must be
        a multiple of dtau."""
        k = (self.T_prime - s) / self.dtau
        if abs(k - round(k)) > 1e-9:
            raise StochasticError(f"s = {s} is not on the tau grid")
        k = int(round(k))
        if not 0 <= k <= self.K:
            raise StochasticError(f"s = {s} outside the path span")
        return k


def _check_flow(cfg, flow):
    if flow.backend.grid_ndim == 0:
        raise StochasticError("path sampling needs a grid backend")
    slack = 1e-9 * max(1.0, abs(flow.t1 - flow.t0))
    if flow.t0 > slack or cfg.T_prime > flow.t1 + slack:
        raise StochasticError(
            f"paths span [0, {cfg.T_prime}] but the flow covers [{flow.t0}, {flow.t1}]"
        )


def path_rng(seed, path_index):
    """Counter-based stream for one path; independent of all other paths."""
    key = np.array([seed, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def increments(gen, K, n, dtau, base_K=None):
    """Draw (K, n) Gaussian increments with variance 2 dtau.

    With base_K < K the stream first draws base_K coarse increments and
    bridges down, so runs at K and 2K share their driving noise.
    """
    if base_K is None:
        base_K = K
    levels = int(round(math.log2(K / base_K))) if K != base_K else 0
    if base_K * 2 ** levels != K:
        raise StochasticError("K must be base_K times a power of two")
    step = dtau * 2 ** levels
    dW = gen.normal(0.0, _sqrt_var(step), size=(base_K, n))
    for _ in range(levels):
        step *= 0.5
        xi = gen.normal(0.0, math.sqrt(step), size=dW.shape)
        fine = np.empty((2 * dW.shape[0], n))
        fine[0::2] = 0.5 * dW + xi
        fine[1::2] = 0.5 * dW - xi
        dW = fine
    return dW


class _SliceProbe:
    """Pointwise field evaluation along a path batch at one time.

    The connection, metric, and flow-rate fields are stacked into a single
    component block so each evaluation point costs one interpolation pass.
    """

    def __init__(self, flow, t):
        self.backend = flow.backend
        self.slc = flow.slice_at(t, cache=True)
        n = self.backend.n
        shape = self.backend.shape
        rate = flow.dg_at(t) + flow.db_at(t)
        self.static_rate_zero = not np.any(rate)
        blocks = [
            self.slc.gamma_bismut.reshape(shape + (n ** 3,)),
            self.slc.g.reshape(shape + (n ** 2,)),
        ]
        if not self.static_rate_zero:
            blocks.append(rate.reshape(shape + (n ** 2,)))
        self.stacked = np.concatenate(blocks, axis=-1)
        # Many model backgrounds (flat tori, constant-torsion flows) have
        # spatially constant fields; skip interpolation entirely for those.
        rows = self.stacked.reshape(-1, self.stacked.shape[-1])
        self.constant = bool(np.all(rows == rows[0]))
        self._row = rows[0].copy() if self.constant else None

    def _probe_rows(self, xs):
        if self.constant:
            return np.broadcast_to(self._row, (len(xs), self._row.shape[0]))
        return self.backend.interp(self.stacked, xs)

    def fields(self, xs):
        """(gamma, g, rate-or-None) arrays at each point of xs."""
        n = self.backend.n
        flat = self._probe_rows(xs)
        gam = flat[:, : n ** 3].reshape(-1, n, n, n)
        g = flat[:, n ** 3 : n ** 3 + n ** 2].reshape(-1, n, n)
        if self.static_rate_zero:
            return gam, g, None
        return gam, g, flat[:, n ** 3 + n ** 2 :].reshape(-1, n, n)

    def metric(self, xs):
        n = self.backend.n
        if self.constant:
            g0 = self._row[n ** 3 : n ** 3 + n ** 2].reshape(n, n)
            return np.broadcast_to(g0, (len(xs), n, n))
        return self.backend.interp(self.slc.g, xs)


def _step_direction(probe, xs, es, dW, dtau):
    """Combined Heun step direction at (xs, es): diffusion along dW plus
    the backward-time frame drift times dtau."""
    dx = (es @ dW[:, :, None])[:, :, 0]
    gam, g, rate = probe.fields(xs)
    # T[p, m, l] = gam[p, m, k, l] dx[p, k], then de[p, m, j] = -T e
    T = (np.swapaxes(gam, 2, 3) @ dx[:, None, :, None])[..., 0]
    de = -(T @ es)
    if not probe.static_rate_zero:
        drift = 0.5 * np.linalg.solve(g, np.swapaxes(rate, -1, -2))
        de += dtau * (drift @ es)
    return dx, de


def _retract(es, g):
    """Polar retraction onto the g-orthonormal frames; returns defects."""
    M = np.swapaxes(es, 1, 2) @ (g @ es)
    n = es.shape[-1]
    defect = np.max(np.abs(M - np.eye(n)), axis=(-2, -1))
    w, V = np.linalg.eigh(M)
    if np.min(w) <= 0.0:
        raise StochasticError("frame Gram matrix lost positivity")
    inv_sqrt = (V / np.sqrt(w)[:, None, :]) @ np.swapaxes(V, 1, 2)
    return es @ inv_sqrt, defect


class PathChunk:
    """Arrays over a contiguous block of paths.

    xs: (m, K+1, n) positions; Ss: (m, K+1, n, n) transports back to the
    starting fibre; dWs: (m, K, n); drift: (m,) max pre-retraction frame
    defect; es: (m, K+1, n, n) frames when store_frames was set.
    """

    def __init__(self, indices, taus, xs, Ss, dWs, drift, es=None):
        self.indices = indices
        self.taus = taus
        self.xs = xs
        self.Ss = Ss
        self.dWs = dWs
        self.drift = drift
        self.es = es

    def __len__(self):
        return len(self.indices)


def _probe_ladder(cfg, flow):
    if _is_static(flow):
        probe = _SliceProbe(flow, cfg.T_prime)
        return [probe] * (cfg.K + 1)
    return [_SliceProbe(flow, cfg.T_prime - k * cfg.dtau) for k in range(cfg.K + 1)]


def _evolve_chunk(cfg, flow, indices, probes, base_K=None, store_frames=False):
    n = flow.backend.n
    K, dtau = cfg.K, cfg.dtau
    m = len(indices)
    dWs = np.empty((m, K, n))
    for row, i in enumerate(indices):
        dWs[row] = increments(path_rng(cfg.seed, int(i)), K, n, dtau, base_K)

    xs = np.empty((m, K + 1, n))
    Ss = np.empty((m, K + 1, n, n))
    es_hist = np.empty((m, K + 1, n, n)) if store_frames else None
    drift = np.zeros(m)

    x = np.tile(np.asarray(cfg.x, dtype=float), (m, 1))
    g0 = probes[0].metric(x)
    L = np.linalg.cholesky(g0)
    e = np.swapaxes(np.linalg.inv(L), -1, -2)
    e0 = e.copy()

    xs[:, 0] = x
    Ss[:, 0] = np.eye(n)
    if store_frames:
        es_hist[:, 0] = e

    for k in range(K):
        dW = dWs[:, k]
        dx1, de1 = _step_direction(probes[k], x, e, dW, dtau)
        x_pred = x + dx1
        e_pred = e + de1
        dx2, de2 = _step_direction(probes[k + 1], x_pred, e_pred, dW, dtau)
        x = x + 0.5 * (dx1 + dx2)
        e = e + 0.5 * (de1 + de2)

        e, defect = _retract(e, probes[k + 1].metric(x))
        drift = np.maximum(drift, defect)

        xs[:, k + 1] = x
        Ss[:, k + 1] = e0 @ np.linalg.inv(e)
        if store_frames:
            es_hist[:, k + 1] = e

    taus = np.arange(K + 1) * dtau
    return PathChunk(np.asarray(indices), taus, xs, Ss, dWs, drift, es_hist)


def iter_path_chunks(cfg, flow, chunk=4096, base_K=None, store_frames=False, threads=1):
    """Yield PathChunk blocks covering paths 0..N-1 in index order.

    Thread count affects scheduling only; every path is drawn from its own
    (seed, index)-keyed stream and the geometry probes are shared read-only,
    so outputs are identical for any thread count.
    """
    _check_flow(cfg, flow)
    probes = _probe_ladder(cfg, flow)
    starts = list(range(0, cfg.N, chunk))
    blocks = [np.arange(s, min(s + chunk, cfg.N)) for s in starts]
    if threads <= 1:
        for idx in blocks:
            yield _evolve_chunk(cfg, flow, idx, probes, base_K, store_frames)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [
            pool.submit(_evolve_chunk, cfg, flow, idx, probes, base_K, store_frames)
            for idx in blocks
        ]
        for fut in futures:
            yield fut.result()


class BrownianPath:
    """Single sampled path with its transport matrices."""

    def __init__(self, chunk_obj, cfg):
        self.cfg = cfg
        self.taus = chunk_obj.taus
        self.xs = chunk_obj.xs[0]
        self.Ss = chunk_obj.Ss[0]
        self.dWs = chunk_obj.dWs[0]
        self.drift = float(chunk_obj.drift[0])
        self.es = None if chunk_obj.es is None else chunk_obj.es[0]

    @property
    def K(self):
        return len(self.dWs)


def sample_path(cfg, flow, path_index, base_K=None):
    """Deterministic single-path sampler (same arithmetic as the batches)."""
    if not 0 <= path_index < cfg.N:
        raise StochasticError("path_index outside 0..N-1")
    _check_flow(cfg, flow)
    probes = _probe_ladder(cfg, flow)
    ch = _evolve_chunk(cfg, flow, np.array([path_index]), probes, base_K, store_frames=True)
    return BrownianPath(ch, cfg)


def transport(path: BrownianPath, k, flow=None):
    """(S_k, isometry defect).  S_k maps (T_x M, g_t) at step k back to the
    starting fibre; the defect compares S^T g(x_0, T') S with g(x_k, t_k)."""
    if not 0 <= k <= path.K:
        raise StochasticError("step index outside the path")
    S = path.Ss[k]
    if flow is None:
        return S, None
    bk = flow.backend
    gT = bk.interp(flow.slice_at(path.cfg.T_prime, cache=True).g, path.xs[:1])[0]
    t_k = path.cfg.T_prime - path.taus[k]
    gk = bk.interp(flow.slice_at(t_k, cache=True).g, path.xs[k : k + 1])[0]
    defect = float(np.max(np.abs(S.T @ gT @ S - gk)))
    return S, defect


def _eval_scalar(backend, f, pts):
    if isinstance(f, ScalarFunction):
        return f.value(pts)
    return backend.interp(np.asarray(f, dtype=float), pts)


def _reduce_mean(values):
    """Pairwise mean and standard error along axis 0."""
    N = values.shape[0]
    mean = np.add.reduce(values, axis=0) / N
    var = np.add.reduce((values - mean) ** 2, axis=0) / (N - 1)
    return mean, np.sqrt(var / N)


def heat_representation(f, s, cfg, flow, base_K=None, chunk=4096, threads=1):
    """Monte Carlo estimate of E[f(X_{tau(s)})] with standard error.

    For a forward heat solution w with w(., s) = f this estimates w(x, T').
    base_K couples runs at different K to the same coarse Gaussian draws.
    """
    k = cfg.tau_index(s)
    vals = np.empty(cfg.N)
    for ch in iter_path_chunks(cfg, flow, chunk=chunk, base_K=base_K, threads=threads):
        vals[ch.indices] = _eval_scalar(flow.backend, f, ch.xs[:, k])
    return _reduce_mean(vals)


def _endo_at(flow, A, t, xs):
    """Evaluate the endomorphism family A at time t and positions xs."""
    field = A(t) if callable(A) else A
    field = np.asarray(field, dtype=float)
    if field.ndim == 2:
        return np.broadcast_to(field, (len(xs),) + field.shape)
    return flow.backend.interp(field, xs)


def feynman_kac(Z, A, s, cfg, flow, base_K=None, chunk=4096, threads=1):
    """E[R S Z(X)] at the slice t = s, with dR/dtau = R S A(t) S^{-1}.

    Z is a vector field on the s-slice (array with trailing component axis);
    A is None, a constant matrix, a matrix field, or a callable t -> matrix
    field giving the zeroth-order endomorphism in coordinate indices.
    Returns (vector estimate, per-component standard error).
    """
    kend = cfg.tau_index(s)
    n = flow.backend.n
    Zf = np.asarray(Z, dtype=float)
    vals = np.empty((cfg.N, n))
    for ch in iter_path_chunks(cfg, flow, chunk=chunk, threads=threads):
        m = len(ch)
        R = np.tile(np.eye(n), (m, 1, 1))
        if A is not None:
            B_here = None
            for k in range(kend):
                t_k = cfg.T_prime - ch.taus[k]
                t_n = cfg.T_prime - ch.taus[k + 1]
                if B_here is None:
                    Ak = _endo_at(flow, A, t_k, ch.xs[:, k])
                    B_here = ch.Ss[:, k] @ Ak @ np.linalg.inv(ch.Ss[:, k])
                An = _endo_at(flow, A, t_n, ch.xs[:, k + 1])
                B_next = ch.Ss[:, k + 1] @ An @ np.linalg.inv(ch.Ss[:, k + 1])
                R_pred = R + cfg.dtau * (R @ B_here)
                R = R + 0.5 * cfg.dtau * (R @ B_here + R_pred @ B_next)
                B_here = B_next
        ZX = flow.backend.interp(Zf, ch.xs[:, kend])
        vals[ch.indices] = np.einsum("pij,pjk,pk->pi", R, ch.Ss[:, kend], ZX)
    return _reduce_mean(vals)
