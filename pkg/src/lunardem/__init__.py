"""Monocular elevation estimation for lunar-style terrain.

Raster preparation, synthetic shaded-terrain generation, an SE-UNet
elevation network with a composite L1/gradient/SSIM objective, training,
and evaluation utilities, all exposed through the ``lunardem`` CLI.
"""

__version__ = "0.1.0"
