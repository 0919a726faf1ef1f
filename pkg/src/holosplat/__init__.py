"""Holistic Gaussian splatting for large scenes: coarse explicit Gaussians plus a
hash-encoded decoder that adds view-conditioned detail Gaussians."""

__version__ = "0.1.0"
