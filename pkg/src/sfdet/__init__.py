"""Source-free adaptation of a miniature query-based detector on synthetic scenes."""

__version__ = "0.1.0"
