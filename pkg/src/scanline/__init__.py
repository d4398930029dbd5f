"""Task-based adaptive scan-line selection on a synthetic cardiac phantom."""

__version__ = "0.1.0"
