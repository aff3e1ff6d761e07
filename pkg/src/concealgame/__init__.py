"""Two-phase representation-concealment games on grid worlds."""
__version__ = "0.1.0"
