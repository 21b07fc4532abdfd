"""Point-prompt 3D segmentation and multiple-instance survival modelling."""

__version__ = "0.1.0"
