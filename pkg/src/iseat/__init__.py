"""Instance-adaptive smoothness-enhanced adversarial training on small dense networks."""

__version__ = "0.1.0"
