"""Numerical toolkit for magnetic geodesic flows on the disk: boundary action and
scattering data, the magnetic ray transform on pairs, its normal operator and linearized
inversion, and the two-dimensional identities linking the flow to the fiberwise Hilbert
transform."""

from .geometry import MagneticSystem, constant_field_system, load_system, system_from_config

__all__ = ["MagneticSystem", "constant_field_system", "load_system", "system_from_config"]
__version__ = "0.1.0"
