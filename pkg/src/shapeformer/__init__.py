"""Decoupled visible-to-amodal instance segmentation with a category-specific
vector-quantised shape prior, trained on a procedural occlusion benchmark."""

__version__ = "0.1.0"
