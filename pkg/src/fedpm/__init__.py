"""Federated optimization simulator with preconditioned parameter mixing."""

__version__ = "0.1.0"
