"""Domain generalization by style-statistics alignment and an evidential
ensemble of per-domain heads fused with the reduced Dempster rule."""

__version__ = "0.1.0"
