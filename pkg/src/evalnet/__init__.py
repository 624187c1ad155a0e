"""Two-stage reconstruction of VIIRS-like nighttime light from DMSP and Landsat inputs."""

__version__ = "0.1.0"
