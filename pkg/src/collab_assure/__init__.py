"""Checking whether a partner's labelled data would improve a model, without seeing the labels."""

__version__ = "0.1.0"
