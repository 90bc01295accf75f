"""Fused sparse-group lasso penalized multi-state Cox models fitted by ADMM."""
__version__ = "0.1.0"
