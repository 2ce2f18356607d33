"""Frame-based E(3)-equivariant diffusion for small-molecule generation."""

__version__ = "0.1.0"
