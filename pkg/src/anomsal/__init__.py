"""Point-cloud saliency from the reconstruction error of a small 3D conv net."""

__version__ = "0.1.0"
