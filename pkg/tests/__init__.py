"""
Test package for SVD-Cache.
"""
