"""Masked sensorimotor pre-training, transfer, and closed-loop evaluation
on a toy planar arm."""

__version__ = "0.1.0"
