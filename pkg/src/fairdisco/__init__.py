"""Fairness-aware skin-lesion classification via disentanglement and contrastive learning."""

__version__ = "0.1.0"
