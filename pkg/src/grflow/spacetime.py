"""Time-twisted connection for coupled metric / 2-form flows.

A flow family (g_t, b_t) carries a natural connection on vectors along the
time direction,

    nabla_t Y = dY/dt + 1/2 d/dt(g + b)(Y, .)^sharp,

with the flow vector contracted into the first slot of the 2-tensor and the
second slot raised by g_t.  This connection is compatible with g_t, and for
a heat solution u the gradient satisfies

    nabla_t grad u = Lap grad u - (Rc + 1/4 H^2 + 1/2 d*H + 1/2 d/dt(g - b))(grad u, .)^sharp

where Lap is the connection Laplacian of the torsion-bearing connection.
On a flow solution the zeroth-order coefficient vanishes identically, so
grad u obeys the plain vector heat equation in the twisted sense.

The sign of the b-part in nabla_t is controlled by the `convention` flag:
"g+b" is the default; "g-b" is kept available because it looks equally
plausible on paper but demonstrably breaks the gradient evolution identity
whenever db/dt is nonzero (see gradient_evolution_residual).

The frame-bundle coordinate realization (horizontal fields E_i, vertical
fields V_ij, and the lifted time field) drives the path sampling in
`stochastic` and is exposed here for direct verification.
"""

import numpy as np

from .geometry import GeometrySlice
from .heat import _node_span, heat_flow, node_slices


class SpacetimeError(ValueError):
    pass


_CONVENTIONS = ("g+b", "g-b")


def _twist_rate(flow, t, convention):
    """The 2-tensor paired with Y inside nabla_t, at time t."""
    if convention not in _CONVENTIONS:
        raise SpacetimeError(f"convention must be one of {_CONVENTIONS}")
    dg, db = flow.dg_at(t), flow.db_at(t)
    return dg + db if convention == "g+b" else dg - db


def musical(slc, T, Y):
    """(T(Y, .))^sharp: Y fills the first slot, the free slot is raised."""
    return slc.sharp(np.einsum("...ac,...a->...c", np.asarray(T), np.asarray(Y)))


class SpacetimeVectorField:
    """Vector field along a flow family, stored at consecutive time nodes.

    values has shape (m,) + spatial + (n,) covering flow.ts[start:start+m].
    """

    def __init__(self, flow, values, start=0):
        self.flow = flow
        self.start = int(start)
        values = np.asarray(values, dtype=float)
        n = flow.backend.n
        tail = flow.backend.shape + (n,)
        if values.ndim != 1 + len(tail) or values.shape[1:] != tail:
            raise SpacetimeError(f"value array shape {values.shape} != (m,) + {tail}")
        if self.start < 0 or self.start + values.shape[0] > len(flow.ts):
            raise SpacetimeError("node range falls outside the stored flow nodes")
        self.values = values

    @classmethod
    def from_callable(cls, flow, fn):
        return cls(flow, np.stack([np.asarray(fn(t), dtype=float) for t in flow.ts]))

    @property
    def ts(self):
        return self.flow.ts[self.start : self.start + len(self.values)]

    def time_derivative(self):
        if len(self.values) < 3:
            raise SpacetimeError("need at least 3 time nodes for a centered derivative")
        return np.gradient(self.values, self.ts, axis=0, edge_order=2)

    def node_slice(self, k):
        return node_slices(self.flow)[self.start + k]


def nabla_t(Y: SpacetimeVectorField, convention="g+b"):
    """Covariant time derivative of Y along its flow family."""
    flow = Y.flow
    dY = Y.time_derivative()
    out = np.empty_like(Y.values)
    for k, t in enumerate(Y.ts):
        slc = Y.node_slice(k)
        out[k] = dY[k] + 0.5 * musical(slc, _twist_rate(flow, t, convention), Y.values[k])
    return SpacetimeVectorField(flow, out, start=Y.start)


def compat_residual(Y: SpacetimeVectorField, convention="g+b"):
    """sup_x |d/dt |Y|^2_g - 2 g(nabla_t Y, Y)| per node.

    Metric compatibility of nabla_t; the finite-difference d/dt converges
    at second order in the node spacing.
    """
    ndY = nabla_t(Y, convention=convention)
    norms = np.stack(
        [Y.node_slice(k).inner_vec(Y.values[k], Y.values[k]) for k in range(len(Y.values))]
    )
    dn = np.gradient(norms, Y.ts, axis=0, edge_order=2)
    out = np.empty(len(Y.values))
    for k in range(len(Y.values)):
        pair = Y.node_slice(k).inner_vec(ndY.values[k], Y.values[k])
        out[k] = np.max(np.abs(dn[k] - 2.0 * pair))
    return out


def commutator_residual(u, slc: GeometrySlice):
    """Lap(grad u) - grad(Lap u) - Rc(grad u, .)^sharp on a fixed slice.

    Lap on vectors is the connection Laplacian of the torsion-bearing
    connection and Rc its Ricci tensor (symmetric part Rc_lc - 1/4 H^2,
    antisymmetric part -1/2 d*H).  The residual is pure discretization
    error, O(h^2) on grids and exactly zero on homogeneous models and on
    constant-coefficient backgrounds.
    """
    V = slc.grad(u)
    lhs = slc.laplacian_vec(V)
    rhs = slc.grad(slc.laplacian_fn(u)) + musical(slc, slc.bismut.total, V)
    return lhs - rhs


def gradient_evolution_residual(u0, flow, s=None, t=None, convention="g+b",
                                substeps=None, correction=True):
    """sup norm of nabla_t grad u - Lap grad u + (Rc + 1/2 d/dt(g-b))(grad u,.)^sharp.

    u solves the forward heat equation from u0 at time s; the residual is
    evaluated at every stored node in [s, t] and measured pointwise in the
    g_t-norm.  With convention "g+b" this converges at the discretization
    order; with "g-b" it stalls at |db/dt(grad u, .)| whenever b moves.

    With correction=False the zeroth-order term is dropped, leaving the
    residual of the plain vector heat equation.  On a flow solution the two
    agree (the coefficient vanishes); on a perturbed family the pure
    residual is bounded below by the defect tensor contracted with grad u.
    """
    s = flow.t0 if s is None else float(s)
    t = flow.t1 if t is None else float(t)
    i1, i2 = _node_span(flow, s, t)
    ts = flow.ts
    slcs = node_slices(flow)

    vals = [np.asarray(u0, dtype=float)]
    for m in range(i1 + 1, i2 + 1):
        vals.append(heat_flow(vals[-1], ts[m - 1], ts[m], flow, substeps=substeps))
    grads = np.stack([slcs[i1 + k].grad(v) for k, v in enumerate(vals)])
    Y = SpacetimeVectorField(flow, grads, start=i1)

    ndY = nabla_t(Y, convention=convention)
    worst = 0.0
    for k in range(len(vals)):
        slc = slcs[i1 + k]
        R = ndY.values[k] - slc.laplacian_vec(Y.values[k])
        if correction:
            coeff = slc.bismut.total + 0.5 * (flow.dg_at(ts[i1 + k]) - flow.db_at(ts[i1 + k]))
            R = R + musical(slc, coeff, Y.values[k])
        worst = max(worst, float(np.sqrt(np.max(slc.inner_vec(R, R)))))
    return worst


# -- frame-bundle coordinates ---------------------------------------------------


class FrameCoords:
    """A point (x, t, e) of the orthonormal frame bundle over spacetime.

    Column j of e holds the coordinates of the j-th frame vector, so
    orthonormality reads e^T g(x, t) e = Id.
    """

    def __init__(self, x, t, e):
        self.x = np.asarray(x, dtype=float)
        self.t = float(t)
        self.e = np.asarray(e, dtype=float)
        n = self.e.shape[0]
        if self.e.shape != (n, n) or self.x.shape != (n,):
            raise SpacetimeError("frame must be (n, n) and the base point (n,)")

    def orthonormality_defect(self, g):
        return float(np.max(np.abs(self.e.T @ g @ self.e - np.eye(len(self.x)))))


def orthonormal_frame(g):
    """A g-orthonormal frame matrix (columns), from the Cholesky factor."""
    L = np.linalg.cholesky(np.asarray(g, dtype=float))
    return np.linalg.inv(L).T


def _point_value(slc, field, x):
    """Evaluate a nodewise tensor field at coordinates x (cubic interp)."""
    if slc.backend.grid_ndim == 0:
        return np.asarray(field, dtype=float)
    return slc.backend.interp(field, x[None])[0]


def frame_vector_fields(fc: FrameCoords, flow, convention="g+b"):
    """Coefficient arrays of the lifted vector fields at fc.

    Returns a dict:
      E_base[i, k]     coefficient of d/dx^k in the horizontal field E_i
      E_frame[i, j, m] coefficient of d/de_j^m in E_i
      V_frame[i, j]    (n, n) array over d/de: V_ij pushes column j along
                       frame vector i (entry [a, m] acts on d/de_a^m)
      dt_frame[i, m]   coefficient of d/de_i^m in the lifted time field
                       (the d/dt coefficient is 1)

    The frame must be orthonormal at (fc.x, fc.t) to 1e-10.
    """
    slc = flow.slice_at(fc.t, cache=True)
    g = _point_value(slc, slc.g, fc.x)
    defect = fc.orthonormality_defect(g)
    if defect > 1e-10:
        raise SpacetimeError(f"frame is not orthonormal: defect {defect:.3e}")
    n = slc.backend.n
    e = fc.e
    gam = _point_value(slc, slc.gamma_bismut, fc.x)

    E_base = e.T
    E_frame = -np.einsum("ki,lj,mkl->ijm", e, e, gam)
    V_frame = np.zeros((n, n, n, n))
    for i in range(n):
        for j in range(n):
            V_frame[i, j, j, :] = e[:, i]

    rate = _twist_rate(flow, fc.t, convention)
    rate = _point_value(slc, rate, fc.x)
    dt_frame = (-0.5 * np.linalg.solve(g, rate.T @ e)).T
    return {"E_base": E_base, "E_frame": E_frame, "V_frame": V_frame, "dt_frame": dt_frame}


def _gamma_at(slc, x):
    return _point_value(slc, slc.gamma_bismut, x)


def horizontal_step(fc: FrameCoords, slc: GeometrySlice, i, eps):
    """One midpoint step along the horizontal field E_i (fixed slice)."""

    def vel(x, e):
        gam = _gamma_at(slc, x)
        xd = e[:, i]
        ed = -np.einsum("mkl,k,lj->mj", gam, xd, e)
        return xd, ed

    xd, ed = vel(fc.x, fc.e)
    xm = fc.x + 0.5 * eps * xd
    em = fc.e + 0.5 * eps * ed
    xd, ed = vel(xm, em)
    return FrameCoords(fc.x + eps * xd, fc.t, fc.e + eps * ed)


def time_step(fc: FrameCoords, flow, eps, convention="g+b"):
    """One Euler step of the lifted time field.

    Orthonormality of the frame degrades only at O(eps^2), which is the
    metric-compatibility statement in coordinates.
    """
    fields = frame_vector_fields(fc, flow, convention=convention)
    return FrameCoords(fc.x, fc.t + eps, fc.e + eps * fields["dt_frame"].T)
