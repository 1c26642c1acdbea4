"""Synthetic data, experiments, reports and the command-line interface."""
