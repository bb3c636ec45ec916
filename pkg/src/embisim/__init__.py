"""External-memory k-bisimulation partition construction and maintenance."""

__version__ = "0.1.0"
