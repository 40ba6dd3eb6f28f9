"""Physics-guided inductive kriging of air pollution on sensor graphs."""

__version__ = "0.1.0"
