"""Toolkit for position inference on block-structured interaction maps:
simulation, a block-aware transformer regressor, training, point
estimation with refinement, ABC posterior sampling, and loop detection."""

__version__ = "0.1.0"
