"""Weakly supervised instance segmentation by cascaded label propagation, at desk scale."""

__version__ = "0.1.0"
