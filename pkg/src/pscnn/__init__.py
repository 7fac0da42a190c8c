"""Desk-scale part localizer and two-stream part-based classifier in numpy."""

__version__ = "0.1.0"
