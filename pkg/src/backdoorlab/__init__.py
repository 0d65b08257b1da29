"""Desk-scale laboratory for clean-label graph backdoor attacks and defenses."""

__version__ = "0.1.0"
