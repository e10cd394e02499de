"""Real-time polyp detect-then-segment runtime and evaluation toolkit."""

__version__ = "0.1.0"
