"""Graph neural network surrogate for urban drainage network hydraulics."""

__version__ = "0.1.0"
