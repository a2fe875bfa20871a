"""Task-adaptive meta-learning with an easy-to-hard task hierarchy."""

__version__ = "0.1.0"
