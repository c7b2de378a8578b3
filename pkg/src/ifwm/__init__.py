"""Flow-guided cross-scale feature alignment for segmentation backbones."""

__version__ = "0.1.0"
