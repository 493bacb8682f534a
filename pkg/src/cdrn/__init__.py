"""Cascaded deraining + anchor-free detection on a numpy autodiff engine."""

__version__ = "0.1.0"
