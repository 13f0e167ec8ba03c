"""Deep attractor network for single-channel source separation, in numpy."""
__version__ = "0.1.0"
