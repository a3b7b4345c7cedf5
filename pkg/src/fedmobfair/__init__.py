"""Federated-learning simulation and fairness metrics for spatial-temporal mobility data."""

from fedmobfair._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
