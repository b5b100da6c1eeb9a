"""Casimir force gradients between a gold sphere and coated plates.

Submodules
----------
dielectric  Drude-Lorentz models, tabulated spectra, Kramers-Kronig continuation.
lifshitz    Sphere-plate force gradient from the finite-temperature Lifshitz formula.
surfaces    Roughness and patch-potential corrections from topography/potential maps.
instrument  Cantilever dynamics, calibrations and a synthetic sweep simulator.
analysis    Sweep screening, drift correction, averaging and relative reductions.
cli         Command-line front end (``casimir-films``).
"""
from __future__ import annotations

__version__ = "0.1.0"
