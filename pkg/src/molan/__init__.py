"""Block-wise, text-anchored noise editing for multimodal sentiment models."""

__version__ = "0.1.0"
