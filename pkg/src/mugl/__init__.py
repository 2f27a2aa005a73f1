"""Class-conditioned multi-person skeletal action generation with a Gaussian-mixture VAE."""

__version__ = "0.1.0"
