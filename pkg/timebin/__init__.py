"""Timebin Desk: energy-time entanglement simulation and time-tag post-processing."""

# Central place to define the tool version recorded in every run manifest.
__version__ = "1.4.0"
