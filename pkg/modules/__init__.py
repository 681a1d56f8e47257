"""
Clustering Mask Transformer - Modules Package
"""

__version__ = "1.0.0"
