"""Simulator for federated multi-group text/visual prompt learning on a synthetic feature world."""

__version__ = "0.1.0"
