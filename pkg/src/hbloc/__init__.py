"""Hierarchical Bayesian source localization for EEG/MEG inverse problems."""

__version__ = "0.1.0"
