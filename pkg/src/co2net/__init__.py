"""Cross-modal consensus network for weakly supervised temporal action
localization on precomputed two-stream snippet features."""

__version__ = "0.1.0"
