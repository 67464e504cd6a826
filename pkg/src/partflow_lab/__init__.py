"""Part-aware feedforward 3D editing at desk scale."""

__version__ = "0.1.0"
