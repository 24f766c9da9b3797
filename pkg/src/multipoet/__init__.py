"""Large covariance estimation under global + local latent factor models."""

__version__ = "0.1.0"
