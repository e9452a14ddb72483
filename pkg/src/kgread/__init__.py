"""Retrieve-and-read link prediction over knowledge graphs."""

__version__ = "0.1.0"
