"""Appended adversarial frame attacks on small differentiable video classifiers."""
__version__ = "0.1.0"
