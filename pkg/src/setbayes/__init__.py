"""Set-based Bayesian inference: generalized GP regression and ensemble neural filtering."""

__version__ = "0.1.0"
