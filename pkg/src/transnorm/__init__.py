"""TransNorm segmentation network built on a small numpy autodiff kernel."""

__version__ = "0.1.0"
