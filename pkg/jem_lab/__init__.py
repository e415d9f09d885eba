"""JEM desk laboratory: a classifier trained jointly as an energy-based model."""

__version__ = "0.1.0"
