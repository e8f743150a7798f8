"""hbarlab: a numerical laboratory for mean-field particle systems and the
semiclassical expansion of their phase-space dynamics."""

__version__ = "0.1.0"
