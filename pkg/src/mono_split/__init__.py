"""Variance-reduced stochastic splitting for monotone stochastic generalized equations."""

__version__ = "0.1.0"
