"""Stride trajectory regression from foot-mounted IMU windows with numpy CNNs."""

__version__ = "0.1.0"
