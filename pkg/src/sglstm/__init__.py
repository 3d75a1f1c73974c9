"""Self-guiding multimodal LSTM captioning, implemented from scratch on numpy."""

__version__ = "0.1.0"
