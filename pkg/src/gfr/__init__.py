"""Gated feature-reuse detection head on a self-contained float64 autodiff kernel."""

__version__ = "0.1.0"
