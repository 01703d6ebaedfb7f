"""Mosaic (Bayer / multi-spectral) super-resolution with pyramid ConvLSTM fusion."""

__version__ = "0.1.0"
