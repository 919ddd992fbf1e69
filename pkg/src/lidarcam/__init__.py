"""Target-less LiDAR-camera extrinsic calibration on a fused bird's-eye-view grid."""

__version__ = "0.1.0"
