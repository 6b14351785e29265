"""Online multi-object tracking with learned appearance, motion and intra-frame topology cues."""

__version__ = "0.1.0"
