"""Cohorted federated learning with model-parameter cohorting and adaptive aggregation."""

__version__ = "0.1.0"
