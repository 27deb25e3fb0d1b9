"""Spiking-network training with surrogate-gradient STBP and a one-at-a-time
hyperparameter sweep harness for event-camera classification."""

__version__ = "0.1.0"
