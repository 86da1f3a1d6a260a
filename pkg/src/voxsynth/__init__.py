"""Feed-forward novel view synthesis from sparse RGB-D views with 3D scene completion."""

__version__ = "0.1.0"
