"""Federated learning with non-parametric prototype regularisation (FedNPR)."""

__version__ = "0.1.0"
