"""Forced blow-up of the regularized Jang equation and MOTS extraction on grids."""

__version__ = "0.1.0"
