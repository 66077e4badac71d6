"""Swin and TNT chest X-ray classifiers on a small numpy autograd, plus weighted ensembling."""

__version__ = "0.1.0"
