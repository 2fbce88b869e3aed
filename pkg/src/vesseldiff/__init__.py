"""Graph-guided conditional diffusion for vessel segmentation."""

__version__ = "0.1.0"
