"""MFEnNet: MetaFormer-encoder U-Net with a numpy autodiff engine."""

__version__ = "0.1.0"
