"""Pull-based load balancing in discrete time: simulator, exact oracle, experiments."""

__version__ = "0.1.0"
