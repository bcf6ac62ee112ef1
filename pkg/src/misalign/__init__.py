"""LiDAR/camera extrinsic misalignment detection and self-correction toolkit."""

__version__ = "0.1.0"
