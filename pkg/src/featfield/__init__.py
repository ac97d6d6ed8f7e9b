"""Image-conditioned neural feature fields distilled from 2D teacher features."""

__version__ = "0.1.0"
