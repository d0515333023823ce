"""Differentially private vertical federated learning with
utility-recovering embedding adjustments, plus an adversarial
evaluation harness."""

__version__ = "0.1.0"
