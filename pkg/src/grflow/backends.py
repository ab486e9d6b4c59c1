"""Discretized model geometries.

Two backends share one tensor-field convention: fields are numpy arrays
whose leading axes run over spatial nodes and whose trailing axes are
tensor components.

* ``PeriodicGrid``: a flat torus ``R^n / (L_1 Z x ... x L_n Z)`` sampled on a
  uniform lattice, with 4th-order centered finite differences (periodic
  wrap) and an FFT differentiation path used as a cross-check.
* ``HomogeneousModel``: a Lie group with left-invariant data.  Every field
  is a single constant component array (no spatial axes); derivatives of
  invariant fields vanish and all first-order structure lives in the
  structure constants.

Both backends expose frame bracket constants ``C[k, i, j]`` with
``[e_i, e_j] = C[k, i, j] e_k`` (zero on a coordinate grid), so the
covariant calculus in ``geometry`` can be written once for both.
"""

from __future__ import annotations

import numpy as np

JACOBI_TOL = 1e-12
MIN_NODES = 8


class BackendError(ValueError):
    """Invalid backend data (bad resolution, non-closed bracket, ...)."""


class NonSPDError(BackendError):
    """A metric array failed the symmetric-positive-definite check."""


def levi_civita_symbol(n=3):
    """Fully antisymmetric symbol eps[i1,...,in] with eps[0,...,n-1] = +1."""
    eps = np.zeros((n,) * n)
    for perm in _permutations(tuple(range(n))):
        eps[perm] = _perm_sign(perm)
    return eps


def _permutations(items):
    if len(items) <= 1:
        yield items
        return
    for i, x in enumerate(items):
        for rest in _permutations(items[:i] + items[i + 1:]):
            yield (x,) + rest


def _perm_sign(perm):
    sign = 1
    perm = list(perm)
    for i in range(len(perm)):
        while perm[i] != i:
            j = perm[i]
            perm[i], perm[j] = perm[j], perm[i]
            sign = -sign
    return sign


def _cubic_weights(t):
    """Lagrange weights on stencil {-1, 0, 1, 2} for fraction t in [0, 1)."""
    return np.stack(
        [
            -t * (t - 1.0) * (t - 2.0) / 6.0,
            (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
            -(t + 1.0) * t * (t - 2.0) / 2.0,
            (t + 1.0) * t * (t - 1.0) / 6.0,
        ],
        axis=-1,
    )


class PeriodicGrid:
    """Uniform periodic lattice on a flat torus.

    Parameters
    ----------
    shape : sequence of int
        Nodes per axis, each >= 8.  len(shape) in {1, 2, 3}.
    lengths : sequence of float
        Period of each axis.
    """

    kind = "periodic_grid"

    def __init__(self, shape, lengths):
        shape = tuple(int(m) for m in shape)
        lengths = tuple(float(L) for L in lengths)
        if len(shape) not in (1, 2, 3):
            raise BackendError(f"grid dimension must be 1, 2 or 3, got {len(shape)}")
        if len(lengths) != len(shape):
            raise BackendError("shape and lengths disagree")
        if any(m < MIN_NODES for m in shape):
            raise BackendError(f"need at least {MIN_NODES} nodes per axis, got {shape}")
        if any(L <= 0 for L in lengths):
            raise BackendError("period lengths must be positive")
        self.n = len(shape)
        self.shape = shape
        self.lengths = np.array(lengths)
        self.h = self.lengths / np.array(shape)
        self.grid_ndim = self.n
        self.C = np.zeros((self.n,) * 3)    # coordinate frame: zero bracket
        self.node_count = int(np.prod(shape))
        self.cell_volume = float(np.prod(self.h))

    # -- coordinates -------------------------------------------------------

    def axis_coords(self, a):
        return np.arange(self.shape[a]) * self.h[a]

    def coords(self):
        """Meshgrid coordinate arrays, one per axis, each of grid shape."""
        axes = [self.axis_coords(a) for a in range(self.n)]
        return np.meshgrid(*axes, indexing="ij")

    def wrap(self, pts):
        return np.mod(pts, self.lengths)

    # -- derivatives -------------------------------------------------------

    def d(self, F, axis):
        """4th-order first derivative along grid axis `axis`."""
        F = np.asarray(F)
        h = self.h[axis]
        return (
            -np.roll(F, -2, axis=axis)
            + 8.0 * np.roll(F, -1, axis=axis)
            - 8.0 * np.roll(F, 1, axis=axis)
            + np.roll(F, 2, axis=axis)
        ) / (12.0 * h)

    def dd(self, F, axis):
        """4th-order pure second derivative along grid axis `axis`."""
        F = np.asarray(F)
        h = self.h[axis]
        return (
            -np.roll(F, -2, axis=axis)
            + 16.0 * np.roll(F, -1, axis=axis)
            - 30.0 * F
            + 16.0 * np.roll(F, 1, axis=axis)
            - np.roll(F, 2, axis=axis)
        ) / (12.0 * h * h)

    def dstack_block(self, F):
        """Derivatives along every grid axis of a grid-leading array.

        out[..., a, <component axes>] = d(F, a); same stencil as `d` with
        the shift arithmetic done in place on contiguous temporaries.
        """
        F = np.asarray(F, dtype=float)
        parts = []
        for a in range(self.n):
            v = np.subtract(np.roll(F, -1, axis=a), np.roll(F, 1, axis=a))
            v *= 8.0
            v -= np.roll(F, -2, axis=a)
            v += np.roll(F, 2, axis=a)
            v /= 12.0 * self.h[a]
            parts.append(v)
        return np.stack(parts, axis=self.n)

    def d_spectral(self, F, axis):
        """FFT first derivative, used as an independent oracle in tests."""
        F = np.asarray(F, dtype=float)
        k = 2.0 * np.pi * np.fft.fftfreq(self.shape[axis], d=self.h[axis])
        m = self.shape[axis]
        if m % 2 == 0:
            k = k.copy()
            k[m // 2] = 0.0      # zero the Nyquist mode for odd-order derivatives
        kshape = [1] * F.ndim
        kshape[axis] = m
        Fh = np.fft.fft(F, axis=axis)
        return np.real(np.fft.ifft(1j * k.reshape(kshape) * Fh, axis=axis))

    # -- quadrature --------------------------------------------------------

    def integrate(self, values, density=None):
        """Node quadrature: sum(values * density) * cell_volume.

        `density` carries the volume factor sqrt(det g); None means flat.
        Sums over the leading grid axes; component axes, if any, survive.
        Periodic trapezoid quadrature, spectrally accurate for smooth data.
        """
        values = np.asarray(values, dtype=float)
        if density is not None:
            values = values * density.reshape(density.shape + (1,) * (values.ndim - self.n))
        total = np.sum(values, axis=tuple(range(self.n))) * self.cell_volume
        return float(total) if np.ndim(total) == 0 else total

    # -- interpolation -----------------------------------------------------

    def interp(self, F, pts):
        """Separable cubic interpolation of F at coordinate points.

        F has grid axes leading, component axes trailing; pts has shape
        (m, n).  Returns (m, *component_shape).
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.interp_multi(F, pts[:, None, :], 1)

    def interp_multi(self, F, pts, slots):
        """Cubic interpolation over `slots` grid blocks.

        F has `slots` copies of the grid axes leading (total slots*n axes)
        and component axes trailing.  pts has shape (m, slots, n).
        """
        F = np.asarray(F)
        pts = np.asarray(pts, dtype=float)
        m = pts.shape[0]
        naxes = slots * self.n
        if pts.shape[1] != slots or pts.shape[2] != self.n:
            raise BackendError("interp point array has wrong shape")
        comp_shape = F.shape[naxes:]
        idx, wts = [], []
        for q in range(slots):
            for a in range(self.n):
                u = pts[:, q, a] / self.h[a]
                i0 = np.floor(u).astype(np.int64)
                t = u - i0
                wts.append(_cubic_weights(t))
                idx.append((i0[:, None] + np.arange(-1, 3)[None, :]) % self.shape[a])
        ncomp = 1
        for s in comp_shape:
            ncomp *= s
        stencil = 4 ** naxes
        if m * stencil * ncomp <= 50_000_000:
            # One flat gather plus a single weighted reduction; much faster
            # than looping over the 4**naxes stencil offsets in python.
            flat = np.zeros((m,) + (1,) * naxes, dtype=np.int64)
            w = np.ones((m,) + (1,) * naxes)
            stride = 1
            for a in range(naxes - 1, -1, -1):
                shp = (m,) + (1,) * a + (4,) + (1,) * (naxes - 1 - a)
                flat = flat + (idx[a] * stride).reshape(shp)
                w = w * wts[a].reshape(shp)
                stride *= self.shape[a % self.n]
            G = F.reshape(-1, ncomp).take(flat.reshape(-1), axis=0)
            out = np.einsum(
                "mo,moc->mc", w.reshape(m, stencil), G.reshape(m, stencil, ncomp)
            )
            return out.reshape((m,) + comp_shape)
        out = np.zeros((m,) + comp_shape)
        wshape = (m,) + (1,) * len(comp_shape)
        for off in np.ndindex(*((4,) * naxes)):
            w = wts[0][:, off[0]]
            for a in range(1, naxes):
                w = w * wts[a][:, off[a]]
            sel = tuple(idx[a][:, off[a]] for a in range(naxes))
            out += w.reshape(wshape) * F[sel]
        return out

    # -- misc ---------------------------------------------------------------

    def constant_field(self, comp):
        comp = np.asarray(comp, dtype=float)
        out = np.empty(self.shape + comp.shape)
        out[...] = comp
        return out

    def node_index(self, pt):
        """Nearest-node multi-index for a coordinate point."""
        pt = np.asarray(pt, dtype=float)
        return tuple(int(round(pt[a] / self.h[a])) % self.shape[a] for a in range(self.n))

    def __repr__(self):
        return f"PeriodicGrid(shape={self.shape}, lengths={tuple(self.lengths)})"


class HomogeneousModel:
    """Left-invariant geometry of a Lie group, given by structure constants.

    structure_constants[k, i, j] = c^k_{ij} with [e_i, e_j] = c^k_{ij} e_k
    in a fixed reference frame.  All tensor fields are constant component
    arrays; the Jacobi identity is validated to 1e-12 at construction.
    """

    kind = "homogeneous"

    def __init__(self, structure_constants):
        C = np.asarray(structure_constants, dtype=float)
        if C.ndim != 3 or len(set(C.shape)) != 1:
            raise BackendError("structure constants must be an (n, n, n) array")
        n = C.shape[0]
        if np.max(np.abs(C + np.swapaxes(C, 1, 2))) > JACOBI_TOL:
            raise BackendError("structure constants not antisymmetric in the lower pair")
        jac = (
            np.einsum("mij,lmk->lijk", C, C)
            + np.einsum("mjk,lmi->lijk", C, C)
            + np.einsum("mki,lmj->lijk", C, C)
        )
        defect = float(np.max(np.abs(jac)))
        if defect > JACOBI_TOL:
            raise BackendError(f"Jacobi identity violated by {defect:.3e}")
        self.n = n
        self.C = C
        self.jacobi_defect = defect
        self.grid_ndim = 0
        self.shape = ()
        self.node_count = 1
        self.cell_volume = 1.0   # unit Haar normalization

    @classmethod
    def su2(cls, lam=1.0):
        """su(2) with [e_i, e_j] = lam * eps_{ijk} e_k."""
        eps = levi_civita_symbol(3)
        return cls(lam * eps)

    @classmethod
    def abelian(cls, n):
        return cls(np.zeros((n, n, n)))

    def d(self, F, axis):
        return np.zeros_like(np.asarray(F, dtype=float))

    def dd(self, F, axis):
        return np.zeros_like(np.asarray(F, dtype=float))

    def integrate(self, values, density=None):
        values = np.asarray(values, dtype=float)
        if density is not None:
            values = values * density
        return float(values) if values.ndim == 0 else values

    def constant_field(self, comp):
        return np.asarray(comp, dtype=float).copy()

    def __repr__(self):
        return f"HomogeneousModel(n={self.n})"


def check_spd(g, tol=0.0):
    """Validate symmetry and positive-definiteness of a metric field."""
    g = np.asarray(g)
    sym_defect = float(np.max(np.abs(g - np.swapaxes(g, -1, -2))))
    if sym_defect > 1e-12 * max(1.0, float(np.max(np.abs(g)))):
        raise NonSPDError(f"metric not symmetric (defect {sym_defect:.3e})")
    w = np.linalg.eigvalsh(g)
    wmin = float(np.min(w))
    if wmin <= tol:
        raise NonSPDError(f"metric not positive definite (min eigenvalue {wmin:.3e})")
    return wmin
