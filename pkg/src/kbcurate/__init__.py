"""Knowledge-base-supervised document retrieval with layered contrastive margins."""

__version__ = "0.1.0"
