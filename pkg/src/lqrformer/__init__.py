"""One transformer policy imitating LQR state feedback across many LTI systems."""

__version__ = "0.1.0"
