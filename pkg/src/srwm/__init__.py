"""Self-referential weight matrices and fast weight programmers in numpy."""

__version__ = "0.1.0"
