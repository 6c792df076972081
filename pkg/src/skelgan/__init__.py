"""Skeleton-conditioned graph annotation with two conditional Wasserstein GANs."""

__version__ = "0.1.0"
