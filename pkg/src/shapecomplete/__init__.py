"""High-resolution shape completion: data synthesis, networks, completion loop."""

__version__ = "0.1.0"
