"""Latent factor models for panels with missing entries: estimation,
imputation with entry-wise inference, and treatment-effect tests."""

__version__ = "0.1.0"
