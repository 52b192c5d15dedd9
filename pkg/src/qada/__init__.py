"""Self-supervised domain adaptation for extractive QA at desk scale."""

__version__ = "0.1.0"
