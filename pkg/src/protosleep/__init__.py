"""Prototype-based interpretable sleep staging from single-channel EEG."""

__version__ = "0.1.0"
