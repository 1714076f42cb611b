"""Offline patch-token exporter for DEM tile PNGs (DEMTOK1 output)."""

__version__ = "0.1.0"
