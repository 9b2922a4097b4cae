"""Articulated object grasp pipeline: procedural objects, grasp labels,
shape and grasp distance fields, detection and evaluation."""

__version__ = "1.0"
