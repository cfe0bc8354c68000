"""Best-of-N action selection with condition-masking confidence for autoregressive policies."""

__version__ = "0.1.0"
