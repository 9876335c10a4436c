"""Energy-based models trained by ranking noise-contrastive estimation against a learned flow sampler."""

__version__ = "0.1.0"
