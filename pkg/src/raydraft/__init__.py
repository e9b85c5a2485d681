"""Chest X-ray interpretation: disease classification, heatmap localization
and attentive report drafting, with a review service on top."""

__version__ = "0.1.0"
