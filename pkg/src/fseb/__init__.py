"""Function-space empirical Bayes regularization for small neural networks."""

__version__ = "0.1.0"
