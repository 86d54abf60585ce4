"""Attention-guided imitation learning: gaze prediction and gaze-modulated policies."""

__version__ = "0.1.0"
