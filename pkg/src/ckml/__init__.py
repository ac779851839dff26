"""Multi-behavior, multi-interest recommendation with knowledge-aware
interest extraction and dynamic-routing interest allocation."""

__version__ = "0.1.0"
