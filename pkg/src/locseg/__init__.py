"""Patch-based lesion segmentation CNNs with explicit spatial-location features."""

__version__ = "0.1.0"

from .errors import LocsegError, ShapeError, ValidationError  # noqa: E402,F401
