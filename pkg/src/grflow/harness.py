"""Inequality battery on path space and the flow-characterization probe.

Each ``verify_*`` operation turns the martingale toolkit into a pass/fail
judgement: it evaluates both sides of one family of inequalities over a grid
of partition-time pairs using a single sweep of sampled paths, then reports
the worst instance.  The standard error attached to a report is the paired
standard error of (lhs - rhs) per path, which is what the 3-sigma verdict
rule actually needs; the margin defaults to a multiple of dtau because the
Euler path discretization carries an O(dtau) weak bias even on exact flow
backgrounds, where several of these inequalities hold with equality.

``characterize`` estimates the defect form, the tensor that vanishes exactly
on flow solutions, from path statistics alone.  For a cylinder probe with
prescribed derivatives at the base point, the mean drift of
``|grad_0 F_tau|^2`` minus its explicit martingale part (kept as a control
variate, it cancels most of the sampling noise) and minus the Hessian
quadrature isolates the defect pairing of the diagonal and base gradients.
A two-window Richardson step removes the leading O(eps) bias.  One-point
probes with gradient v see +Q(v, v); two-point probes with slot gradients
(u, w) see Q(w, u + w), so (2v, -v) sees -Q(v, v) and suitable pairs recover
off-diagonal and antisymmetric entries of Q.
"""

import numpy as np

from .fields import Constant, FourierScalar, ScalarFunction
from .pathspace import (
    CylinderFunction,
    GridScalar,
    _ginv_probe,
    _grad_segments,
    _norm_integral,
    base_frame,
    cylinder_gradient,
    cylinder_hessian,
    induced_martingale,
)
from .report import DefectReport, VerificationReport
from .stochastic import _reduce_mean, iter_path_chunks

_REG = 1e-8          # regularizer for plain (non-squared) gradient norms
_NOTE_PAIRED = "stderr is the paired standard error of lhs - rhs per path"


class HarnessError(ValueError):
    pass


# -- probe functions -----------------------------------------------------------


class BumpLinear(ScalarFunction):
    """Compactly supported linear probe a . (y - c) w(|y - c|^2 / R^2).

    Displacements use the nearest periodic image, and the window is the
    quintic smoothstep in q = |d|^2, so w'(0) = w''(0) = 0.  At the center
    the value is 0, the gradient is exactly ``covector`` and the Hessian
    vanishes; outside radius R the function is identically zero.
    """

    def __init__(self, lengths, center, covector, radius):
        self.lengths = np.asarray(lengths, dtype=float)
        self.center = np.asarray(center, dtype=float)
        self.a = np.asarray(covector, dtype=float)
        self.radius = float(radius)
        if not 0.0 < self.radius <= 0.5 * float(np.min(self.lengths)):
            raise HarnessError("bump radius must be positive and fit in half the box")

    def _disp(self, pts):
        d = np.asarray(pts, dtype=float) - self.center
        d = d - self.lengths * np.round(d / self.lengths)
        return d

    def _window(self, q):
        """w(u), dw/dq, d2w/dq2 at u = q / R^2, clipped to the support."""
        R2 = self.radius ** 2
        u = np.clip(q / R2, 0.0, 1.0)
        w = 1.0 + u ** 3 * (-10.0 + u * (15.0 - 6.0 * u))
        wq = -30.0 * u ** 2 * (1.0 - u) ** 2 / R2
        wqq = -60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / R2 ** 2
        return w, wq, wqq

    def value(self, pts):
        d = self._disp(pts)
        w, _, _ = self._window(np.sum(d * d, axis=-1))
        return (d @ self.a) * w

    def grad(self, pts):
        d = self._disp(pts)
        w, wq, _ = self._window(np.sum(d * d, axis=-1))
        lin = d @ self.a
        return w[..., None] * self.a + (2.0 * lin * wq)[..., None] * d

    def hess(self, pts):
        d = self._disp(pts)
        _, wq, wqq = self._window(np.sum(d * d, axis=-1))
        lin = d @ self.a
        sym = self.a[..., :, None] * d[..., None, :] + d[..., :, None] * self.a[..., None, :]
        dd = d[..., :, None] * d[..., None, :]
        eye = np.eye(len(self.a))
        return (2.0 * wq)[..., None, None] * sym + lin[..., None, None] * (
            (2.0 * wq)[..., None, None] * eye + (4.0 * wqq)[..., None, None] * dd
        )


def point_probe(lengths, x, covector, eps, radius, shift=0.0):
    """One-slot cylinder function shift + a.(y-x) w at backward time eps."""
    bump = BumpLinear(lengths, x, covector, radius)
    slot = bump if shift == 0.0 else Constant(shift) + bump
    return CylinderFunction((float(eps),), (slot,))


def two_point_probe(lengths, x, cov_first, cov_second, eps, radius):
    """(1 + bump_u(X_0)) (1 + bump_w(X_eps)) with slot gradients u, w at x."""
    return CylinderFunction(
        (0.0, float(eps)),
        (
            Constant(1.0) + BumpLinear(lengths, x, cov_first, radius),
            Constant(1.0) + BumpLinear(lengths, x, cov_second, radius),
        ),
    )


class _SquaredSlot(ScalarFunction):
    def __init__(self, f):
        self.f = f

    def value(self, pts):
        return self.f.value(pts) ** 2

    def grad(self, pts):
        return 2.0 * self.f.value(pts)[..., None] * self.f.grad(pts)

    def hess(self, pts):
        v = self.f.value(pts)
        D = self.f.grad(pts)
        outer = D[..., :, None] * D[..., None, :]
        return 2.0 * (outer + v[..., None, None] * self.f.hess(pts))


def squared_cylinder(F):
    """The cylinder function F^2 (slotwise squares of the same partition)."""
    return CylinderFunction(F.taus, tuple(_SquaredSlot(s) for s in F.slots))


def direction_basis(flow, cfg):
    """Labels and columns of an orthonormal frame for g_{T'}(x)."""
    _, L = base_frame(flow, cfg.x, cfg.T_prime)
    e0 = np.linalg.inv(L).T
    labels = [f"e{i + 1}" for i in range(e0.shape[1])]
    return labels, [e0[:, i].copy() for i in range(e0.shape[1])]


# -- shared path-sweep machinery ----------------------------------------------


def _step_index(cfg, tau, what="time"):
    k = float(tau) / cfg.dtau
    if abs(k - round(k)) > 1e-9 * max(1.0, abs(k)):
        raise HarnessError(f"{what} {tau} is not a multiple of dtau")
    k = int(round(k))
    if not 0 <= k <= cfg.K:
        raise HarnessError(f"{what} {tau} outside [0, T']")
    return k


def _hs_sq(M, L):
    """|M|^2 in g_{T'}(x) for a chunk of raised 2-tensors: |L^T M L|_F^2."""
    A = L.T @ M @ L
    return np.einsum("pab,pab->p", A, A)


class _MartingaleData:
    """Per-chunk evaluators for the conditioned versions of one cylinder
    function: transported gradients, mixed parallel Hessians and values at
    partition times, with the merged tails cached across chunks."""

    def __init__(self, F, cfg, flow):
        self.F = F
        self.cfg = cfg
        self.flow = flow
        self.mf = induced_martingale(F, flow, cfg.T_prime)
        self.gT, self.L = base_frame(flow, cfg.x, cfg.T_prime)
        self._ext = {}

    def ext(self, k):
        if k not in self._ext:
            self._ext[k] = self.mf.extended(k * self.cfg.dtau)
        return self._ext[k]

    def _points(self, ch, ext):
        idx = ext.path_indices(ch.taus)
        return ch.xs[:, idx], ch.Ss[:, idx]

    def grad(self, ch, sigma, k):
        ext = self.ext(k)
        pts, trs = self._points(ch, ext)
        return cylinder_gradient(ext, self.flow, self.cfg.T_prime, pts, trs, sigma)

    def hess(self, ch, sigma, k):
        ext = self.ext(k)
        pts, trs = self._points(ch, ext)
        return cylinder_hessian(
            ext, self.flow, self.cfg.T_prime, pts, trs, sigma, k * self.cfg.dtau
        )

    def values(self, ch, k):
        ext = self.ext(k)
        pts, _ = self._points(ch, ext)
        return self.mf.value_points(k * self.cfg.dtau, pts[:, :-1], pts[:, -1])

    def base_gradient_sq(self):
        """|grad E[F]|^2 at the starting point, from the PDE side."""
        field = GridScalar(self.flow.backend, self.mf.tail(0.0))
        Du = field.grad(np.asarray(self.cfg.x, dtype=float)[None])[0]
        giv = _ginv_probe(self.flow, self.cfg.T_prime, {}).at(
            np.asarray(self.cfg.x, dtype=float)[None]
        )[0]
        return float(Du @ (giv @ Du))


def _margin_for(margin, margin_scale, dtau, lhs, rhs):
    if margin is not None:
        return float(margin)
    return margin_scale * dtau * max(1.0, abs(lhs), abs(rhs))


def _instance(variant, tau1, tau2, lhs_p, rhs_p, margin, margin_scale, dtau):
    lhs, _ = _reduce_mean(lhs_p)
    rhs, _ = _reduce_mean(rhs_p)
    _, se = _reduce_mean(lhs_p - rhs_p)
    mar = _margin_for(margin, margin_scale, dtau, lhs, rhs)
    slack = rhs + 3.0 * se + mar - lhs
    return {
        "variant": variant,
        "tau1": float(tau1),
        "tau2": float(tau2),
        "lhs": float(lhs),
        "rhs": float(rhs),
        "stderr": float(se),
        "margin": float(mar),
        "slack": float(slack),
        "verdict": "PASS" if slack >= 0.0 else "FAIL",
    }


def _worst_report(name, instances, cfg, extra=None):
    worst = min(instances, key=lambda r: r["slack"])
    inputs = {
        "x": [float(v) for v in cfg.x],
        "T_prime": float(cfg.T_prime),
        "K": int(cfg.K),
        "N": int(cfg.N),
        "variant": worst["variant"],
        "tau1": worst["tau1"],
        "tau2": worst["tau2"],
        "instances": instances,
    }
    if extra:
        inputs.update(extra)
    return VerificationReport(
        name=name,
        lhs=worst["lhs"],
        rhs=worst["rhs"],
        lhs_stderr=worst["stderr"],
        rhs_stderr=0.0,
        margin=worst["margin"],
        inputs=inputs,
        seeds=(cfg.seed,),
        notes=_NOTE_PAIRED,
    )


def _default_pairs(cfg, ksig):
    cand = sorted({0, cfg.K // 4, cfg.K // 2, (3 * cfg.K) // 4, cfg.K, ksig})
    pairs = list(zip(cand, cand[1:]))
    if len(cand) > 2:
        pairs.append((cand[0], cand[-1]))
    return pairs


def _quad_nodes(lo, hi, pieces=4):
    step = max(1, (hi - lo) // pieces)
    ks = sorted(set(range(lo, hi, step)) | {hi})
    return ks


def _trapezoid(series, node_ks, dtau):
    """Trapezoid rule over step indices node_ks for per-path arrays."""
    out = 0.0
    for a, b in zip(node_ks, node_ks[1:]):
        out = out + 0.5 * (b - a) * dtau * (series[a] + series[b])
    return out


# -- inequality batteries -------------------------------------------------------


def verify_bochner_path(F, sigma, cfg, flow, pairs=None, margin=None,
                        margin_scale=2.0, chunk=4096, threads=1, base_K=None,
                        label=None):
    """Test the evolution inequalities for |grad_sigma F_tau|^2 between time
    pairs: the quadratic form with the Hessian production term (an equality
    on exact flow backgrounds), the weak form without it, the linear form for
    the unsquared norm, and the submartingale property across the partition
    jump.  The jump contributes |grad_sigma F_sigma|^2 whenever
    tau1 < sigma <= tau2 (conditioning merges slots at the right endpoint).
    """
    ksig = _step_index(cfg, sigma, "sigma")
    if pairs is None:
        pairlist = _default_pairs(cfg, ksig)
    else:
        pairlist = [(_step_index(cfg, a, "tau1"), _step_index(cfg, b, "tau2"))
                    for a, b in pairs]
    pairlist = [(a, b) for a, b in pairlist if b > a and b > ksig]
    if not pairlist:
        raise HarnessError("no nontrivial pair with tau2 > sigma")

    quad = {}
    need_g, need_h = {ksig}, set()
    for a, b in pairlist:
        ks = _quad_nodes(max(a, ksig), b)
        quad[(a, b)] = ks
        need_h.update(ks)
        need_g.update((a, b))

    data = _MartingaleData(F, cfg, flow)
    N = cfg.N
    gsq = {k: np.empty(N) for k in need_g}
    hsq = {k: np.empty(N) for k in need_h}
    for ch in iter_path_chunks(cfg, flow, chunk=chunk, base_K=base_K, threads=threads):
        for k in sorted(need_g | need_h, reverse=True):
            if k in need_g:
                V = data.grad(ch, sigma, k)
                VL = V @ data.L
                gsq[k][ch.indices] = np.einsum("pj,pj->p", VL, VL)
            if k in need_h:
                hsq[k][ch.indices] = _hs_sq(data.hess(ch, sigma, k), data.L)

    gab = {k: np.sqrt(v + _REG ** 2) for k, v in gsq.items()}
    dtau = cfg.dtau
    instances = []
    for a, b in pairlist:
        jump = a < ksig <= b
        hq = _trapezoid(hsq, quad[(a, b)], dtau)
        jsq = gsq[ksig] if jump else 0.0
        jab = gab[ksig] if jump else 0.0
        rows = [
            ("quadratic", gsq[a] + 2.0 * hq + jsq, gsq[b]),
            ("weak", gsq[a] + jsq, gsq[b]),
            ("linear", gab[a] + jab, gab[b]),
        ]
        if jump:
            rows.append(("submartingale", gab[a], gab[b]))
        for variant, lhs_p, rhs_p in rows:
            instances.append(_instance(variant, a * dtau, b * dtau,
                                       lhs_p, rhs_p, margin, margin_scale, dtau))

    name = f"bochner-path[{label}]" if label else "bochner-path"
    return _worst_report(name, instances, cfg, extra={"sigma": ksig * dtau})


def verify_gradient_estimates(F, sigma, cfg, flow, taus=None, margin=None,
                              margin_scale=2.0, chunk=4096, threads=1,
                              base_K=None, label=None):
    """Test the gradient estimates for the conditioned cylinder function:
    monotonicity of E|grad_sigma F_tau| and of its square between time pairs
    (the averaged surrogate of the conditional statement), the semigroup
    bound |grad E F|^2 <= E|grad_0 F|^2 at the starting point, and the
    quadratic-variation bound E d[F, F]_tau / dtau <= 2 E|grad_tau F|^2
    using the identity d[F, F]_tau = 2 |grad_tau F_tau|^2 dtau.
    """
    ksig = _step_index(cfg, sigma, "sigma")
    if taus is None:
        ks = sorted({ksig, (ksig + cfg.K) // 2, cfg.K})
    else:
        ks = sorted({_step_index(cfg, t, "tau") for t in taus} | {ksig})
    pairs = [(a, b) for a, b in zip(ks, ks[1:])]
    diag_ks = sorted({k for k in (cfg.K // 4, cfg.K // 2, (3 * cfg.K) // 4) if k > 0})

    data = _MartingaleData(F, cfg, flow)
    N = cfg.N
    gsq = {k: np.empty(N) for k in ks}
    dsq = {k: np.empty(N) for k in diag_ks}     # |grad_tau F_tau|^2
    fsq = {k: np.empty(N) for k in diag_ks}     # |grad_tau F|^2, unconditioned
    gsq0 = np.empty(N)
    idxF = F.path_indices(np.arange(cfg.K + 1) * cfg.dtau)
    for ch in iter_path_chunks(cfg, flow, chunk=chunk, base_K=base_K, threads=threads):
        for k in sorted(ks, reverse=True):
            V = data.grad(ch, sigma, k)
            VL = V @ data.L
            gsq[k][ch.indices] = np.einsum("pj,pj->p", VL, VL)
        for k in diag_ks:
            V = data.grad(ch, k * cfg.dtau, k)
            VL = V @ data.L
            dsq[k][ch.indices] = np.einsum("pj,pj->p", VL, VL)
            W = cylinder_gradient(F, flow, cfg.T_prime, ch.xs[:, idxF],
                                  ch.Ss[:, idxF], k * cfg.dtau)
            WL = W @ data.L
            fsq[k][ch.indices] = np.einsum("pj,pj->p", WL, WL)
        V = cylinder_gradient(F, flow, cfg.T_prime, ch.xs[:, idxF],
                              ch.Ss[:, idxF], 0.0)
        VL = V @ data.L
        gsq0[ch.indices] = np.einsum("pj,pj->p", VL, VL)

    dtau = cfg.dtau
    instances = []
    for a, b in pairs:
        la_, lb = np.sqrt(gsq[a] + _REG ** 2), np.sqrt(gsq[b] + _REG ** 2)
        instances.append(_instance("norm-monotone", a * dtau, b * dtau,
                                   la_, lb, margin, margin_scale, dtau))
        instances.append(_instance("square-monotone", a * dtau, b * dtau,
                                   gsq[a], gsq[b], margin, margin_scale, dtau))
    base = data.base_gradient_sq()
    instances.append(_instance("semigroup", 0.0, 0.0,
                               np.full(N, base), gsq0, margin, margin_scale, dtau))
    for k in diag_ks:
        instances.append(_instance("quadratic-variation", k * dtau, k * dtau,
                                   2.0 * dsq[k], 2.0 * fsq[k],
                                   margin, margin_scale, dtau))

    name = f"gradient-estimates[{label}]" if label else "gradient-estimates"
    return _worst_report(name, instances, cfg, extra={"sigma": ksig * dtau})


def verify_poincare_path(F, tau1, tau2, cfg, flow, margin=None,
                         margin_scale=2.0, chunk=4096, threads=1,
                         base_K=None, label=None):
    """Test E[(F_tau2 - F_tau1)^2] <= 2 E[int_tau1^tau2 |grad_tau F|^2 dtau],
    the two-time Poincare inequality with the Dirichlet form reduced to the
    Malliavin window integral."""
    k1 = _step_index(cfg, tau1, "tau1")
    k2 = _step_index(cfg, tau2, "tau2")
    if k2 < k1:
        raise HarnessError("need tau1 <= tau2")
    data = _MartingaleData(F, cfg, flow)
    N = cfg.N
    lhs_p, rhs_p = np.empty(N), np.empty(N)
    for ch in iter_path_chunks(cfg, flow, chunk=chunk, base_K=base_K, threads=threads):
        v2 = data.values(ch, k2)
        v1 = data.values(ch, k1)
        lhs_p[ch.indices] = (v2 - v1) ** 2
        partial = _grad_segments(F, flow, cfg.T_prime, ch, data.L)
        rhs_p[ch.indices] = 2.0 * _norm_integral(F, partial, k1 * cfg.dtau,
                                                 k2 * cfg.dtau, data.L)
    inst = _instance("poincare", k1 * cfg.dtau, k2 * cfg.dtau,
                     lhs_p, rhs_p, margin, margin_scale, cfg.dtau)
    name = f"poincare-path[{label}]" if label else "poincare-path"
    return _worst_report(name, [inst], cfg)


def verify_logsob_path(F, tau1, tau2, cfg, flow, margin=None,
                       margin_scale=2.0, chunk=4096, threads=1,
                       base_K=None, label=None):
    """Test the two-time log-Sobolev inequality
    E[(F^2 log F^2)_tau2 - (F^2 log F^2)_tau1] <= 4 E[F L_window F]
    for a positive cylinder function F."""
    k1 = _step_index(cfg, tau1, "tau1")
    k2 = _step_index(cfg, tau2, "tau2")
    if k2 < k1:
        raise HarnessError("need tau1 <= tau2")
    G = squared_cylinder(F)
    dataG = _MartingaleData(G, cfg, flow)
    _, L = base_frame(flow, cfg.x, cfg.T_prime)
    N = cfg.N
    lhs_p, rhs_p = np.empty(N), np.empty(N)
    for ch in iter_path_chunks(cfg, flow, chunk=chunk, base_K=base_K, threads=threads):
        g2 = dataG.values(ch, k2)
        g1 = dataG.values(ch, k1)
        if min(g1.min(), g2.min()) <= 0.0:
            raise HarnessError("log-Sobolev battery needs F bounded away from 0")
        lhs_p[ch.indices] = g2 * np.log(g2) - g1 * np.log(g1)
        partial = _grad_segments(F, flow, cfg.T_prime, ch, L)
        rhs_p[ch.indices] = 4.0 * _norm_integral(F, partial, k1 * cfg.dtau,
                                                 k2 * cfg.dtau, L)
    inst = _instance("log-sobolev", k1 * cfg.dtau, k2 * cfg.dtau,
                     lhs_p, rhs_p, margin, margin_scale, cfg.dtau)
    name = f"logsob-path[{label}]" if label else "logsob-path"
    return _worst_report(name, [inst], cfg)


def verify_hessian_variants(F, cfg, flow, margin=None, margin_scale=2.0,
                            tau_pieces=8, chunk=4096, threads=1, base_K=None,
                            label=None, skip_logsob=False):
    """Test the Hessian-improved estimates: for each slot time sigma,
    E|grad_sigma F_sigma|^2 + 2 int E|Hess|^2 dtau <= E|grad_sigma F|^2
    (an equality on exact flow backgrounds); the variance bound
    E[(F - EF)^2] + 4 iint E|Hess|^2 <= 2 E[int |grad_sigma F|^2 dsigma];
    and for positive F the entropy bound with the log-Hessian production
    term.  The sigma integrals use the exact piecewise-constant segmentation
    (column sets change only at slot times); dropping the sub-segment
    triangle under-counts the left side, which only makes the test
    conservative.
    """
    dtau = cfg.dtau
    sig_ks = sorted({_step_index(cfg, t, "slot time") for t in F.taus})
    quad = {s: _quad_nodes(s, cfg.K, tau_pieces) for s in sig_ks}
    seg_edges = [0.0] + [float(t) for t in F.taus]
    seg_len = {}
    for l, s in enumerate(sig_ks):
        lo = seg_edges[l] if l < len(seg_edges) else 0.0
        seg_len[s] = s * dtau - lo

    positive = not skip_logsob
    G = squared_cylinder(F) if positive else None
    data = _MartingaleData(F, cfg, flow)
    dataG = _MartingaleData(G, cfg, flow) if positive else None
    EF = float(GridScalar(flow.backend, data.mf.tail(0.0)).value(
        np.asarray(cfg.x, dtype=float)[None])[0])

    N = cfg.N
    dsq = {s: np.empty(N) for s in sig_ks}
    fsq = {s: np.empty(N) for s in sig_ks}
    hq = {s: np.empty(N) for s in sig_ks}
    var_p = np.empty(N)
    mall_p = np.empty(N)
    ent_pos = True
    ent_p = np.empty(N) if positive else None
    dd_p = np.empty(N) if positive else None
    idxF = F.path_indices(np.arange(cfg.K + 1) * dtau)

    for ch in iter_path_chunks(cfg, flow, chunk=chunk, base_K=base_K, threads=threads):
        rows = ch.indices
        for s in sig_ks:
            sig = s * dtau
            V = data.grad(ch, sig, s)
            VL = V @ data.L
            dsq[s][rows] = np.einsum("pj,pj->p", VL, VL)
            W = cylinder_gradient(F, flow, cfg.T_prime, ch.xs[:, idxF],
                                  ch.Ss[:, idxF], sig)
            WL = W @ data.L
            fsq[s][rows] = np.einsum("pj,pj->p", WL, WL)
            hs = {k: _hs_sq(data.hess(ch, sig, k), data.L) for k in quad[s]}
            hq[s][rows] = _trapezoid(hs, quad[s], dtau)
        vals = F.value(ch.xs[:, idxF])
        var_p[rows] = (vals - EF) ** 2
        partial = _grad_segments(F, flow, cfg.T_prime, ch, data.L)
        mall_p[rows] = _norm_integral(F, partial, 0.0, cfg.T_prime, data.L)
        if positive:
            gvals = G.value(ch.xs[:, idxF])
            if gvals.min() <= 0.0:
                ent_pos = False
                continue
            ent_p[rows] = gvals * np.log(gvals)
            acc = 0.0
            for s in sig_ks:
                sig = s * dtau
                lh = {}
                for k in quad[s]:
                    gk = dataG.values(ch, k)
                    if gk.min() <= 0.0:
                        ent_pos = False
                        break
                    Vs = dataG.grad(ch, sig, k)
                    Vt = dataG.grad(ch, k * dtau, k)
                    M = dataG.hess(ch, sig, k)
                    LH = (M / gk[:, None, None]
                          - Vt[:, :, None] * Vs[:, None, :] / (gk ** 2)[:, None, None])
                    lh[k] = gk * _hs_sq(LH, data.L)
                if not ent_pos:
                    break
                acc = acc + seg_len[s] * _trapezoid(lh, quad[s], dtau)
            dd_p[rows] = acc

    instances = []
    for s in sig_ks:
        instances.append(_instance("hessian-gradient", s * dtau, s * dtau,
                                   dsq[s] + 2.0 * hq[s], fsq[s],
                                   margin, margin_scale, dtau))
    dd_quad = sum(seg_len[s] * hq[s] for s in sig_ks)
    instances.append(_instance("variance", 0.0, cfg.T_prime,
                               var_p + 4.0 * dd_quad, 2.0 * mall_p,
                               margin, margin_scale, dtau))
    if positive and ent_pos:
        EG = float(GridScalar(flow.backend, dataG.mf.tail(0.0)).value(
            np.asarray(cfg.x, dtype=float)[None])[0])
        lhs_p = ent_p - EG * np.log(EG) + 2.0 * dd_p
        instances.append(_instance("entropy", 0.0, cfg.T_prime,
                                   lhs_p, 4.0 * mall_p,
                                   margin, margin_scale, dtau))

    name = f"hessian-variants[{label}]" if label else "hessian-variants"
    return _worst_report(name, instances, cfg)


# -- flow characterization -------------------------------------------------------


def _defect_estimate(F, cfg, flow, m_window, chunk, threads, base_K):
    """Per-path estimates of the defect pairing seen by the probe F over one
    window: (|V_eps|^2 - |V_0|^2 - martingale part - 2 int |M|^2) / eps with
    eps = m_window dtau.  The martingale part Sum <2 M g V, dW> is kept as a
    control variate; dropping its first step keeps the integrand adapted and
    leaves only an O(dtau / eps) share of the variance uncancelled."""
    data = _MartingaleData(F, cfg, flow)
    dtau = cfg.dtau
    mm = int(m_window)
    d = np.empty(cfg.N)
    for ch in iter_path_chunks(cfg, flow, chunk=chunk, base_K=base_K, threads=threads):
        m = len(ch)
        hs = np.empty((m, mm + 1))
        cv = np.zeros(m)
        gsq = None
        for k in range(mm, 0, -1):
            V = data.grad(ch, 0.0, k)
            M = data.hess(ch, 0.0, k)
            hs[:, k] = _hs_sq(M, data.L)
            if k == mm:
                VL = V @ data.L
                gsq = np.einsum("pj,pj->p", VL, VL)
            else:
                z = 2.0 * np.einsum("pab,pb->pa", M, V @ data.gT) @ data.L
                cv += np.einsum("pj,pj->p", z, ch.dWs[:, k])
        V0 = data.grad(ch, 0.0, 0)
        V0L = V0 @ data.L
        gsq0 = np.einsum("pj,pj->p", V0L, V0L)
        hqp = dtau * hs[:, 1]
        for a in range(1, mm):
            hqp = hqp + 0.5 * dtau * (hs[:, a] + hs[:, a + 1])
        d[ch.indices] = (gsq - gsq0 - cv - 2.0 * hqp) / (mm * dtau)
    return d


def characterize(family, cfg, eps_steps=(16, 32), radius=None, threshold=None,
                 chunk=4096, threads=1, base_K=None, with_antisymmetric=True,
                 label=None):
    """Estimate the defect form Q at the starting point from path statistics
    and judge whether the background is a flow solution.

    Returns a DefectReport whose ``form`` holds the diagonal entries
    (ei,ei), the symmetrized off-diagonal entries (ei,ej)+ and, when
    requested, the antisymmetric parts (ei,ej)-; ``is_flow`` is True when
    every entry is within 3 stderr plus the threshold of zero.  The default
    threshold covers the O(dtau) discretization bias and the residual
    O(eps^2) probe bias left after Richardson extrapolation.
    """
    backend = family.backend
    if getattr(backend, "grid_ndim", 0) == 0:
        raise HarnessError("characterize needs a periodic grid background")
    m1, m2 = (int(m) for m in eps_steps)
    if not 1 <= m1 < m2 <= cfg.K:
        raise HarnessError("need 1 <= eps_steps[0] < eps_steps[1] <= K")
    gT, _ = base_frame(family, cfg.x, cfg.T_prime)
    labels, dirs = direction_basis(family, cfg)
    nd = len(dirs)
    if radius is None:
        radius = 0.45 * float(np.min(backend.lengths))
    x = np.asarray(cfg.x, dtype=float)
    lengths = backend.lengths
    eps1, eps2 = m1 * cfg.dtau, m2 * cfg.dtau

    def run(build):
        """Richardson-extrapolate the window estimates; the probe is rebuilt
        with its slot at each window edge so both windows share one smooth
        bias expansion in eps."""
        d1 = _defect_estimate(build(eps1), cfg, family, m1, chunk, threads, base_K)
        d2 = _defect_estimate(build(eps2), cfg, family, m2, chunk, threads, base_K)
        return (eps2 * d1 - eps1 * d2) / (eps2 - eps1)

    # diagonal entries: one-point probe sees +Q(v, v), the two-point probe
    # with slot gradients (2v, -v) sees -Q(v, v)
    form, stderr, per_path = {}, {}, {}
    for i, v in enumerate(dirs):
        a = gT @ v
        d_one = run(lambda e, a=a: point_probe(lengths, x, a, e, radius))
        d_two = run(lambda e, a=a: two_point_probe(lengths, x, 2.0 * a, -a, e, radius))
        per_path[f"({labels[i]},{labels[i]})"] = 0.5 * (d_one - d_two)
    # off-diagonal: slot gradients (u, w) see Q(w, u + w); choosing
    # u + w = v_i, w = v_j isolates Q(v_j, v_i)
    for i in range(nd):
        for j in range(i + 1, nd):
            ai, aj = gT @ dirs[i], gT @ dirs[j]
            d_ji = run(lambda e, u=ai - aj, w=aj: two_point_probe(lengths, x, u, w, e, radius))
            d_ij = run(lambda e, u=aj - ai, w=ai: two_point_probe(lengths, x, u, w, e, radius))
            per_path[f"({labels[i]},{labels[j]})+"] = 0.5 * (d_ij + d_ji)
            if with_antisymmetric:
                per_path[f"({labels[i]},{labels[j]})-"] = 0.5 * (d_ij - d_ji)
    for key, arr in per_path.items():
        mean, se = _reduce_mean(arr)
        form[key] = float(mean)
        stderr[key] = float(se)

    if threshold is None:
        threshold = 2.0 * (cfg.dtau + (m1 * cfg.dtau) ** 2)
    name = f"characterize[{label}]" if label else "characterize"
    return DefectReport(
        name=name,
        form=form,
        stderr=stderr,
        threshold=float(threshold),
        inputs={
            "x": [float(v) for v in cfg.x],
            "T_prime": float(cfg.T_prime),
            "K": int(cfg.K),
            "N": int(cfg.N),
            "eps_steps": [m1, m2],
            "radius": float(radius),
        },
        seeds=(cfg.seed,),
    )


# -- probe catalog and battery ---------------------------------------------------


def probe_catalog(flow, cfg, radius=None):
    """Fixed catalog of cylinder probes: label, function, positivity flag.

    Fourier one-point and two-point products (positive, shifted away from 0)
    and a two-point bump pair with opposed slot gradients, the configuration
    most sensitive to a defect of either sign.
    """
    backend = flow.backend
    if getattr(backend, "grid_ndim", 0) == 0:
        raise HarnessError("the probe catalog needs a periodic grid background")
    lengths = backend.lengths
    n = backend.n
    T = cfg.T_prime
    half = (cfg.K // 2) * cfg.dtau

    def mode(axis):
        m = [0] * n
        m[axis] = 1
        return tuple(m)

    f_a = FourierScalar(lengths, mode(0), amp=0.6, phase=0.3) + Constant(2.0)
    f_b = FourierScalar(lengths, mode(min(1, n - 1)), amp=0.4, phase=1.1) + Constant(1.5)
    probes = [
        ("fourier-1pt", CylinderFunction((T,), (f_a,)), True),
        ("fourier-2pt", CylinderFunction((half, T), (f_b, f_a)), True),
    ]
    if radius is None:
        radius = 0.45 * float(np.min(lengths))
    gT, L = base_frame(flow, cfg.x, T)
    v = np.linalg.inv(L).T[:, 0]
    a = 1.5 * (gT @ v)
    eps = max(1, cfg.K // 8) * cfg.dtau
    probes.append(
        ("bump-2pt",
         two_point_probe(lengths, np.asarray(cfg.x, dtype=float), 2.0 * a, -a, eps, radius),
         False)
    )
    return probes


def run_battery(flow, cfg, probes=None, margin=None, margin_scale=2.0,
                chunk=4096, threads=1, base_K=None):
    """Run every verifier over the probe catalog and return the reports."""
    if probes is None:
        probes = probe_catalog(flow, cfg)
    dtau = cfg.dtau
    k1, k2 = cfg.K // 4, (3 * cfg.K) // 4
    reports = []
    for lab, F, positive in probes:
        sig = min((_step_index(cfg, t) for t in F.taus), default=0)
        sig = min(sig, cfg.K // 4)
        common = dict(margin=margin, margin_scale=margin_scale, chunk=chunk,
                      threads=threads, base_K=base_K, label=lab)
        reports.append(verify_bochner_path(F, sig * dtau, cfg, flow, **common))
        reports.append(verify_gradient_estimates(F, sig * dtau, cfg, flow, **common))
        reports.append(verify_poincare_path(F, k1 * dtau, k2 * dtau, cfg, flow, **common))
        if positive:
            reports.append(verify_logsob_path(F, k1 * dtau, k2 * dtau, cfg, flow, **common))
        reports.append(verify_hessian_variants(F, cfg, flow, skip_logsob=not positive,
                                               **common))
    return reports
