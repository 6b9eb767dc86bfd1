"""Numerical laboratory for conservative Kawasaki dynamics of continuous 1-D
spin systems: transfer-operator free energies, constrained sampling,
coarse-graining, multiscale dynamics, H^-1 error metrics and LSI certificates."""

__version__ = "0.1.0"
