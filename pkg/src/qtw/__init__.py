"""Learning physically valid single-qubit trajectories from continuous measurement records."""

__version__ = "0.1.0"
