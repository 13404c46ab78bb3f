"""Token-sparse fine-tuning engine for decoder-only transformers."""

__version__ = "0.1.0"
