"""Stereo calibration, vein/needle detection and needle-vein alignment."""
