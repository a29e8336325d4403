"""Unpaired face-sketch synthesis through a line-drawing bridge domain."""

__version__ = "0.1.0"
