"""Analytic scalar functions and field builders for the model geometries.

Scalar functions carry closed-form value / gradient / Hessian evaluators so
path functionals can be differentiated without grid error; the same objects
can be sampled onto grid nodes for PDE work.
"""

from __future__ import annotations

import numpy as np

from .backends import levi_civita_symbol


class ScalarFunction:
    """Base class: smooth scalar function on the torus with derivatives."""

    def value(self, pts):
        raise NotImplementedError

    def grad(self, pts):
        raise NotImplementedError

    def hess(self, pts):
        raise NotImplementedError

    def sample(self, grid):
        mesh = np.stack(grid.coords(), axis=-1)   # (*shape, n)
        flat = mesh.reshape(-1, grid.n)
        return self.value(flat).reshape(grid.shape)

    def __add__(self, other):
        return LinearCombo([(1.0, self), (1.0, as_scalar_function(other))])

    def __rmul__(self, w):
        return LinearCombo([(float(w), self)])


def as_scalar_function(obj):
    if isinstance(obj, ScalarFunction):
        return obj
    return Constant(float(obj))


class Constant(ScalarFunction):
    def __init__(self, c):
        self.c = float(c)

    def value(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.full(pts.shape[:-1], self.c)

    def grad(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.zeros(pts.shape)

    def hess(self, pts):
        pts = np.asarray(pts, dtype=float)
        n = pts.shape[-1]
        return np.zeros(pts.shape[:-1] + (n, n))


class FourierScalar(ScalarFunction):
    """amp * sin(k . (x - x0) + phase) with k_a = 2 pi m_a / L_a."""

    def __init__(self, lengths, modes, amp=1.0, phase=0.0, x0=None):
        lengths = np.asarray(lengths, dtype=float)
        modes = np.asarray(modes, dtype=float)
        self.k = 2.0 * np.pi * modes / lengths
        self.amp = float(amp)
        self.phase = float(phase)
        self.x0 = np.zeros_like(lengths) if x0 is None else np.asarray(x0, dtype=float)

    def _arg(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.tensordot(pts - self.x0, self.k, axes=([-1], [0])) + self.phase

    def value(self, pts):
        return self.amp * np.sin(self._arg(pts))

    def grad(self, pts):
        c = self.amp * np.cos(self._arg(pts))
        return c[..., None] * self.k

    def hess(self, pts):
        s = -self.amp * np.sin(self._arg(pts))
        return s[..., None, None] * np.outer(self.k, self.k)


class LinearCombo(ScalarFunction):
    def __init__(self, terms):
        self.terms = [(float(w), as_scalar_function(f)) for w, f in terms]

    def value(self, pts):
        return sum(w * f.value(pts) for w, f in self.terms)

    def grad(self, pts):
        return sum(w * f.grad(pts) for w, f in self.terms)

    def hess(self, pts):
        return sum(w * f.hess(pts) for w, f in self.terms)


def direction_probe(lengths, v, x0):
    """Periodic function with value 0, gradient v and zero Hessian at x0.

    f(y) = sum_a v_a (L_a / 2 pi) sin(2 pi (y_a - x0_a) / L_a).
    """
    lengths = np.asarray(lengths, dtype=float)
    v = np.asarray(v, dtype=float)
    terms = []
    for a in range(len(v)):
        if v[a] == 0.0:
            continue
        modes = np.zeros(len(v))
        modes[a] = 1.0
        amp = v[a] * lengths[a] / (2.0 * np.pi)
        terms.append((1.0, FourierScalar(lengths, modes, amp=amp, x0=x0)))
    if not terms:
        terms = [(1.0, Constant(0.0))]
    return LinearCombo(terms)


# -- field builders on a grid -------------------------------------------------


def constant_metric(grid, mat):
    return grid.constant_field(np.asarray(mat, dtype=float))


def conformal_metric(grid, phi):
    """g = exp(2 phi(x)) * delta; phi is a ScalarFunction or node values."""
    phi_vals = phi.sample(grid) if isinstance(phi, ScalarFunction) else np.asarray(phi, dtype=float)
    eye = np.eye(grid.n)
    return np.exp(2.0 * phi_vals)[..., None, None] * eye


def two_form_mode(grid, i, j, fn: ScalarFunction, amp=1.0):
    """b = amp * fn(x) dx^i ^ dx^j (componentwise b_ij = amp fn, b_ji = -...)."""
    vals = amp * fn.sample(grid)
    b = np.zeros(grid.shape + (grid.n, grid.n))
    b[..., i, j] = vals
    b[..., j, i] = -vals
    return b


def constant_three_form(grid, c):
    """H0 = c dx^1 ^ dx^2 ^ dx^3 on a 3-torus (zero for n < 3)."""
    n = grid.n
    H = np.zeros(grid.shape + (n, n, n))
    if n == 3:
        H[...] = c * levi_civita_symbol(3)
    return H
