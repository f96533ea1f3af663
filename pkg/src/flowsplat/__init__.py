"""Dynamic Gaussian splatting supervised by rendered optical flow."""

__version__ = "0.1.0"
