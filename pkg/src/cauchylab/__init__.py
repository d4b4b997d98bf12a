"""Finite-difference laboratory for Lipschitz stability of piecewise-linear
potentials in the Schroedinger equation Delta u + q u = 0 from local Cauchy data."""

from __future__ import annotations

__version__ = "0.1.0"
