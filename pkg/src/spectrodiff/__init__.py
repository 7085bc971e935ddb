"""Class-conditional time-series generation through spectrogram diffusion."""

__version__ = "0.1.0"
