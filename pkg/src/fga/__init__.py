"""Frozen Gaussian approximation for linear strictly hyperbolic systems."""
