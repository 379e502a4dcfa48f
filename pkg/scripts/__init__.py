"""VibroSP: signal-processing pipeline optimisation for vibration fault classification."""

__version__ = "0.1.0"
