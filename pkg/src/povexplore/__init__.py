"""Information-gain driven exploration of a grid world with POV-dependent targets."""

__version__ = "0.1.0"
