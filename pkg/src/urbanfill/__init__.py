"""Imputation of gridded urban activity data with partial-convolution 3-D U-Nets."""

__version__ = "0.1.0"
