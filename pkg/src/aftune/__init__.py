"""Auditable fine-tuning and inference at desk scale."""

__version__ = "0.1.0"
