"""
Utility package for the Clustering Mask Transformer toolkit
"""

from .helpers import *
