"""Desk-scale neural sign-language translation toolkit."""

__version__ = "0.1.0"
