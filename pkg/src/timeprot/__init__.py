"""Executable model of OS time protection."""

__version__ = "0.1.0"
