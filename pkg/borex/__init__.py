"""Black-box saliency maps refined by Gaussian-process Bayesian optimisation."""

__version__ = "0.1.0"
