"""Desk-scale simulator of a ground-vehicle CAN network under attack, with
resilience analysis of the recorded runs.

Modules: ``signals`` (frames, codecs, log format), ``vbus`` (buses,
filters, text gateway), ``vehicle`` (physics and driver), ``ecus``,
``threats`` (attack/defense plugins), ``runner`` (scenarios, CLI backend)
and ``resilience`` (metrics and model fit).
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
