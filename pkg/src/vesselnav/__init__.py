"""Deterministic simulator and navigation library for guidewire steering in vascular trees."""

__version__ = "0.1.0"
