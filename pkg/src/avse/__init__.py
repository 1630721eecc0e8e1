"""Audio-visual speech enhancement with compressed lip features."""

__version__ = "0.1.0"
