"""Two-scale (FE-HMM) finite-element solver for 2D magnetoquasistatic problems."""

__version__ = "0.1.0"
