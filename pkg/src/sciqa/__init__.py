"""Screen-content image quality assessment with a patch-level CNN,
effectiveness-based training-data selection, and local-contrast
weighted pooling."""

__version__ = "0.1.0"
