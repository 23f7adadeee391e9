"""Removing radial undersampling artefacts from cine MRI with a U-net
applied to spatio-temporal (xt / yt) slices."""

__version__ = "0.1.0"
