"""Oriented-box detection head with stage-decoupled regression and cascaded
activation masks, built on a small float64 reverse-mode autodiff core."""

__version__ = "0.1.0"
