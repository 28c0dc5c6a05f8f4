"""mamsr: single-image super-resolution with multi-path adaptive modulation blocks."""

__version__ = "1.0.0"
