"""Event-stream action recognition with selective state-space blocks."""

__version__ = "0.1.0"
