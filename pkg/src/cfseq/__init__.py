"""Counterfactual sequence regression with contrastive history encoding."""
__version__ = "0.1.0"
