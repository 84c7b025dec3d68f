"""Image-folder extractor: CLIP embeddings into workbench containers."""

__version__ = "0.1.0"
