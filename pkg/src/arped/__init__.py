"""Autoregressive multi-phase region proposal network for pedestrian detection, in numpy."""

__version__ = "0.1.0"
