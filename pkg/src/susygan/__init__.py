"""Generative adversarial network for holomorphic superpotentials on a discretized box."""
from .errors import SusyGanError
from .field_grid import BoxDomain, ComplexGrid

__version__ = "0.1.0"
__all__ = ["BoxDomain", "ComplexGrid", "SusyGanError", "__version__"]
