"""Sparse structured spectral-mixture multi-output GP kernels."""
