# Clustering Mask Transformer Toolkit - Package Initializer

__version__ = "1.0.0"
__description__ = "Toy clustering mask transformer for panoptic segmentation of synthetic scenes"
