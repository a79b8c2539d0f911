"""Synthetic scenes, referring oracle, tracking loop, training driver and checkpoints."""
