"""Posterior estimation for misspecified simulators by flow-matching correction of a simulation-trained posterior."""

__version__ = "0.1.0"
