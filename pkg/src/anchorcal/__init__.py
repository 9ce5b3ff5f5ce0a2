"""Camera intrinsic and INS-camera extrinsic refinement from georeferenced anchors."""

__version__ = "0.1.0"
