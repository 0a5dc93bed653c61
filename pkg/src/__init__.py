"""
SVD-Cache: subspace-aware feature caching experiments.
"""

__version__ = '0.1.0'
