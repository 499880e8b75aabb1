"""Statistical and empirical study of channel pruning as redundancy reduction."""

__version__ = "0.1.0"
