"""Unsupervised domain adaptation by calibrating predictive uncertainties."""

__version__ = "0.1.0"
