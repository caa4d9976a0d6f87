class ConfigError(ValueError):
    """Invalid world, agent or experiment configuration."""


class MovementError(ValueError):
    """An action would move the agent off the grid."""


class InconsistencyError(RuntimeError):
    """An observation has zero probability under the current belief."""


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass
