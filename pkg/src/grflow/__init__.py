"""Generalized Ricci flow on model geometries, with deterministic PDE and
Monte Carlo path-space verification of the associated Bochner identities,
gradient estimates and functional inequalities."""

__version__ = "0.1.0"
