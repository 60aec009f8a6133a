"""Temporal knowledge distillation: latest-slice training regularized by historical teachers."""

__version__ = "0.1.0"
