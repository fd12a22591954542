"""Compressed-CNN robustness toolkit.

Builds small convolutional classifiers and their distilled, pruned, and
binarized variants, attacks them with six white-box and black-box methods,
and evaluates robustness through stress-strain curves, box statistics,
PCA, and class activation maps.
"""

__version__ = "0.1.0"
