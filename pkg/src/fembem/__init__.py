"""Adaptive FEM-BEM coupling with an inexact Uzawa outer iteration."""

__version__ = "0.1.0"
