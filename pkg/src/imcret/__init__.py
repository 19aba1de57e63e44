"""Joint image-text embedding with intra-modal constraint losses."""

__version__ = "0.1.0"
