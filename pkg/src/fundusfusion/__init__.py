"""Fundus photograph and demographic fusion models for diabetic-retinopathy risk."""

__version__ = "0.1.0"

__all__ = ["__version__"]
