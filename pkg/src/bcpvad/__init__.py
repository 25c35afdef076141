"""Personalised voice activity detection for bone-conduction earbuds."""

__version__ = "0.1.0"
