"""Two-stage lung nodule detection: edge-weighted segmentation candidates, 3D classifier false-positive reduction."""

__version__ = "0.1.0"
