"""procamsim: simulator and toolkit for a coaxial projector-camera device.

The device shares one lens and one pixel raster between capture (infrared)
and projection (visible), with an electrically tunable focus element whose
power shifts both the focus plane and the effective pinhole intrinsics.
"""

__version__ = "0.1.0"
