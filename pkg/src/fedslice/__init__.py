"""Desk-scale simulator for resource-aware federated learning with
salience-ranked, budget-constrained sub-model slicing."""

__version__ = "0.1.0"
