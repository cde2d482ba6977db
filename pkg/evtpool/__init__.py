"""Pooled extreme-value modelling of elite swim times"""

__version__ = '0.1.0'
