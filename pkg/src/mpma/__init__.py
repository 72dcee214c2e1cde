"""Multi-task paired masking with alignment for image/report pre-training, at desk scale."""

__version__ = "0.1.0"
