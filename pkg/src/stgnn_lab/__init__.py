"""Space-time graph filters, ST-GNNs and stochastic-perturbation stability experiments."""

__version__ = "0.1.0"
