"""Volumetric CNN for 3D shape classification.

Feed-forward K-means/BIC network design, confusion-set analysis over the
output-layer anchor vectors, and hierarchical-clustering + random-forest
re-classification of confusing classes.
"""

__version__ = "0.1.0"
