"""Minimal hidden Markov models from process models via joint tensor factorization."""

__version__ = "0.1.0"
